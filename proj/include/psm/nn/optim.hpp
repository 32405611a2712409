#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psm/nn/tensor.hpp"

namespace psm::nn {

struct NamedParam {
    std::string name;
    Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

struct AdamWConfig {
    double learning_rate = 1e-3;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const;
};

/// Moments are stored in parameter-list order.
struct OptimizerState {
    AdamWConfig config;
    std::int64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

class AdamW {
public:
    explicit AdamW(const ParamList& params, AdamWConfig cfg = {});
    AdamW(const ParamList& params, OptimizerState state);

    /// One decoupled-weight-decay update of every parameter from its grad.
    void step(ParamList& params);
    const OptimizerState& state() const { return state_; }

private:
    OptimizerState state_;
};

void zero_grad(ParamList& params);

/// Fixed-order FNV-1a over names, shapes and raw bytes of the values.
std::uint64_t checksum(const ParamList& params);
std::string hex64(std::uint64_t v);

}  // namespace psm::nn
