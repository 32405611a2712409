#include "psm/nn/optim.hpp"

#include <cmath>
#include <cstring>
#include <cstdio>

#include "psm/common.hpp"

namespace psm::nn {

void AdamWConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ValidationError("eps must be > 0");
}

AdamW::AdamW(const ParamList& params, AdamWConfig cfg) {
    cfg.validate();
    state_.config = cfg;
    for (const auto& p : params) {
        state_.m.emplace_back(p.tensor.numel(), 0.0);
        state_.v.emplace_back(p.tensor.numel(), 0.0);
    }
}

AdamW::AdamW(const ParamList& params, OptimizerState state) : state_(std::move(state)) {
    state_.config.validate();
    if (state_.m.size() != params.size() || state_.v.size() != params.size() || state_.step < 0)
        throw ValidationError("optimizer state does not match the parameter list");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (state_.m[i].size() != params[i].tensor.numel() || state_.v[i].size() != params[i].tensor.numel())
            throw ValidationError("optimizer moment shape mismatch for " + params[i].name);
}

void AdamW::step(ParamList& params) {
    if (params.size() != state_.m.size()) throw ValidationError("AdamW::step: parameter list changed");
    for (const auto& p : params)
        if (!p.tensor.has_grad()) throw ValidationError("AdamW::step: missing gradient for " + p.name);
    const auto& c = state_.config;
    ++state_.step;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state_.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state_.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto theta = params[k].tensor.data();
        const auto g = std::as_const(params[k].tensor).grad();
        auto& m = state_.m[k];
        auto& v = state_.v[k];
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            theta[i] -= c.learning_rate * (mh / (std::sqrt(vh) + c.eps) + c.weight_decay * theta[i]);
        }
    }
}

void zero_grad(ParamList& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

std::uint64_t checksum(const ParamList& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto feed = [&h](const void* data, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& p : params) {
        feed(p.name.data(), p.name.size());
        for (int d : p.tensor.shape()) feed(&d, sizeof d);
        const auto data = p.tensor.data();
        feed(data.data(), data.size_bytes());
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace psm::nn
