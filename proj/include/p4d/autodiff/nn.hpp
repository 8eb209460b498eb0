#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p4d/autodiff/graph.hpp"
#include "p4d/autodiff/optim.hpp"

namespace p4d::ad {

// y = x W + b with W stored as (in x out).
class Linear {
public:
    Linear() = default;
    Linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed,
           bool bias = true);

    Var operator()(Graph& g, Var x) const;
    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }
    Tensor& weight() const { return *w_; }
    Tensor* bias() const { return b_; }

private:
    Tensor* w_ = nullptr;
    Tensor* b_ = nullptr;
    std::size_t in_ = 0, out_ = 0;
};

// Stack of Linear layers with ReLU between them (none after the last).
class Mlp {
public:
    Mlp() = default;
    Mlp(ParameterSet& params, const std::string& name, const std::vector<std::size_t>& widths, std::uint64_t seed);

    Var operator()(Graph& g, Var x) const;
    std::size_t in_features() const { return layers_.front().in_features(); }
    std::size_t out_features() const { return layers_.back().out_features(); }
    const std::vector<Linear>& layers() const { return layers_; }

private:
    std::vector<Linear> layers_;
};

// Plain-tensor forward of the same layers; used by inference paths that do
// not need a tape.
Tensor linear_forward(const Linear& layer, const Tensor& x);
Tensor mlp_forward(const Mlp& mlp, const Tensor& x);

}  // namespace p4d::ad
