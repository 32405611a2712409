#include "psm/nn/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "psm/common.hpp"
#include "text_io.hpp"

namespace psm::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

namespace {

using nlohmann::json;

json encode_values(std::span<const double> v) {
    std::vector<std::uint8_t> bytes(v.size_bytes());
    if (!v.empty()) std::memcpy(bytes.data(), v.data(), bytes.size());
    return json::binary(std::move(bytes));
}

std::vector<double> decode_values(const json& j, const std::string& what) {
    if (!j.is_binary()) throw FormatError("checkpoint: " + what + " is not a binary blob");
    const auto& b = j.get_binary();
    if (b.size() % sizeof(double)) throw FormatError("checkpoint: " + what + " has a truncated value blob");
    std::vector<double> out(b.size() / sizeof(double));
    if (!out.empty()) std::memcpy(out.data(), b.data(), b.size());
    return out;
}

}  // namespace

const Tensor& Checkpoint::param(const std::string& name) const {
    for (const auto& p : params)
        if (p.name == name) return p.tensor;
    throw FormatError("checkpoint (" + kind + ") has no parameter '" + name + "'");
}

json checkpoint_to_json(const Checkpoint& ckpt) {
    json j;
    j["format_version"] = kCheckpointFormatVersion;
    j["kind"] = ckpt.kind;
    j["config"] = ckpt.config;
    json ps = json::array();
    for (const auto& p : ckpt.params)
        ps.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"data", encode_values(p.tensor.data())}});
    j["params"] = std::move(ps);
    if (ckpt.optimizer) {
        const auto& o = *ckpt.optimizer;
        json m = json::array(), v = json::array();
        for (const auto& x : o.m) m.push_back(encode_values(x));
        for (const auto& x : o.v) v.push_back(encode_values(x));
        j["optimizer"] = {{"type", "adamw"},
                          {"learning_rate", o.config.learning_rate},
                          {"weight_decay", o.config.weight_decay},
                          {"beta1", o.config.beta1},
                          {"beta2", o.config.beta2},
                          {"eps", o.config.eps},
                          {"step", o.step},
                          {"m", std::move(m)},
                          {"v", std::move(v)}};
    }
    j["trace"] = ckpt.trace;
    return j;
}

Checkpoint checkpoint_from_json(const json& j) {
    try {
        const int version = j.at("format_version").get<int>();
        if (version != kCheckpointFormatVersion)
            throw FormatError("checkpoint format_version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointFormatVersion) + ")");
        Checkpoint c;
        c.kind = j.at("kind").get<std::string>();
        c.config = j.at("config");
        for (const auto& p : j.at("params")) {
            const auto name = p.at("name").get<std::string>();
            c.params.push_back({name, Tensor::from(p.at("shape").get<Shape>(), decode_values(p.at("data"), name))});
        }
        if (j.contains("optimizer")) {
            const auto& o = j.at("optimizer");
            OptimizerState s;
            s.config.learning_rate = o.at("learning_rate").get<double>();
            s.config.weight_decay = o.at("weight_decay").get<double>();
            s.config.beta1 = o.at("beta1").get<double>();
            s.config.beta2 = o.at("beta2").get<double>();
            s.config.eps = o.at("eps").get<double>();
            s.step = o.at("step").get<std::int64_t>();
            for (const auto& x : o.at("m")) s.m.push_back(decode_values(x, "optimizer.m"));
            for (const auto& x : o.at("v")) s.v.push_back(decode_values(x, "optimizer.v"));
            c.optimizer = std::move(s);
        }
        if (j.contains("trace")) c.trace = j.at("trace");
        return c;
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = json::to_cbor(checkpoint_to_json(ckpt));
    detail::write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto text = detail::read_file(path);
    json j;
    try {
        j = json::from_cbor(text.begin(), text.end());
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": not a checkpoint (" + e.what() + ")");
    }
    try {
        return checkpoint_from_json(j);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace psm::nn
