#include "p4d/autodiff/nn.hpp"

#include <cmath>

#include "p4d/util/rng.hpp"

namespace p4d::ad {

Linear::Linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed,
               bool bias)
    : in_(in), out_(out) {
    w_ = &params.add(name + ".w", {in, out});
    // Glorot-uniform
    init_uniform(*w_, std::sqrt(6.0 / static_cast<double>(in + out)), seed);
    if (bias) b_ = &params.add(name + ".b", {1, out});
}

Var Linear::operator()(Graph& g, Var x) const {
    Var y = g.matmul(x, g.param(*w_));
    if (b_) y = g.add(y, g.param(*b_));
    return y;
}

Mlp::Mlp(ParameterSet& params, const std::string& name, const std::vector<std::size_t>& widths,
         std::uint64_t seed) {
    if (widths.size() < 2) throw std::invalid_argument("Mlp needs at least input and output widths");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        layers_.emplace_back(params, name + "." + std::to_string(i), widths[i], widths[i + 1],
                             util::mix_seed(seed, i));
    }
}

Var Mlp::operator()(Graph& g, Var x) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        x = layers_[i](g, x);
        if (i + 1 < layers_.size()) x = g.relu(x);
    }
    return x;
}

Tensor linear_forward(const Linear& layer, const Tensor& x) {
    const Tensor& w = layer.weight();
    const std::size_t n = x.rows(), in = w.rows(), out = w.cols();
    if (x.cols() != in) throw ShapeError("linear_forward: input width mismatch");
    Tensor y = Tensor::matrix(n, out);
    for (std::size_t r = 0; r < n; ++r) {
        double* yr = &y(r, 0);
        if (layer.bias())
            for (std::size_t j = 0; j < out; ++j) yr[j] = (*layer.bias())[j];
        for (std::size_t p = 0; p < in; ++p) {
            const double xv = x(r, p);
            if (xv == 0.0) continue;
            const double* wr = w.storage().data() + p * out;
            for (std::size_t j = 0; j < out; ++j) yr[j] += xv * wr[j];
        }
    }
    return y;
}

Tensor mlp_forward(const Mlp& mlp, const Tensor& x) {
    Tensor h = x;
    const auto& layers = mlp.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = linear_forward(layers[i], h);
        if (i + 1 < layers.size())
            for (auto& v : h.storage()) v = v > 0 ? v : 0.0;
    }
    return h;
}

}  // namespace p4d::ad
