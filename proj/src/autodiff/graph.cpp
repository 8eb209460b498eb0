#include "p4d/autodiff/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace p4d::ad {

namespace {

enum class Broadcast { kSame, kRow, kScalar };

Broadcast broadcast_mode(std::string_view op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape() || (a.numel() == b.numel() && a.rows() == b.rows() && a.cols() == b.cols())) {
        return Broadcast::kSame;
    }
    if (b.numel() == 1) return Broadcast::kScalar;
    if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::kRow;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

Shape matrix_shape(std::size_t r, std::size_t c) { return {r, c}; }

// C (m x n) += A (m x k) * B (k x n)
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (m x n) += A (m x k) * B^T, B is (n x k)
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] += s;
        }
    }
}

// C (k x n) += A^T * B, A is (m x k), B is (m x n)
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

SparseRows SparseRows::gather(std::span<const std::uint32_t> rows, std::size_t in_rows) {
    SparseRows m;
    m.in_rows = in_rows;
    m.index.reserve(rows.size());
    m.weight.reserve(rows.size());
    m.offsets.reserve(rows.size() + 1);
    for (auto r : rows) {
        m.add(r, 1.0);
        m.end_row();
    }
    return m;
}

SparseRows SparseRows::group_mean(std::span<const std::uint32_t> group_of, std::size_t groups) {
    std::vector<std::uint32_t> count(groups + 1, 0);
    for (auto g : group_of) ++count[g + 1];
    std::vector<std::uint32_t> start(groups + 1, 0);
    for (std::size_t g = 0; g < groups; ++g) start[g + 1] = start[g] + count[g + 1];
    SparseRows m;
    m.in_rows = group_of.size();
    m.offsets = start;
    m.index.resize(group_of.size());
    m.weight.resize(group_of.size());
    std::vector<std::uint32_t> cursor(start.begin(), start.end() - 1);
    for (std::uint32_t i = 0; i < group_of.size(); ++i) {
        const auto g = group_of[i];
        const auto slot = cursor[g]++;
        m.index[slot] = i;
        m.weight[slot] = 1.0 / static_cast<double>(count[g + 1]);
    }
    return m;
}

SparseRows SparseRows::scatter(std::span<const std::uint32_t> placement, std::size_t out_rows) {
    std::vector<std::int64_t> source(out_rows, -1);
    for (std::uint32_t i = 0; i < placement.size(); ++i) source[placement[i]] = i;
    SparseRows m;
    m.in_rows = placement.size();
    for (std::size_t r = 0; r < out_rows; ++r) {
        if (source[r] >= 0) m.add(static_cast<std::uint32_t>(source[r]), 1.0);
        m.end_row();
    }
    return m;
}

Tensor apply(const SparseRows& map, const Tensor& in) {
    if (in.rows() != map.in_rows) {
        throw ShapeError("sparse map expects " + std::to_string(map.in_rows) + " input rows, got " +
                         std::to_string(in.rows()));
    }
    const std::size_t d = in.cols();
    Tensor out = Tensor::matrix(map.out_rows(), d);
    for (std::size_t r = 0; r < map.out_rows(); ++r) {
        double* dst = &out(r, 0);
        for (auto k = map.offsets[r]; k < map.offsets[r + 1]; ++k) {
            const double w = map.weight[k];
            const double* src = in.storage().data() + static_cast<std::size_t>(map.index[k]) * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += w * src[j];
        }
    }
    return out;
}

Var Graph::push(Tensor value, std::vector<std::uint32_t> inputs,
                std::function<void(Graph&, const Node&)> backprop) {
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    for (auto i : n.inputs) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
    if (n.needs_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

std::vector<double>& Graph::grad_of(std::uint32_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
    return n.grad;
}

void Graph::require_same(std::string_view op, Var a, Var b) const {
    const auto& ta = value(a);
    const auto& tb = value(b);
    if (ta.rows() != tb.rows() || ta.cols() != tb.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(ta.shape()) + " vs " +
                         shape_str(tb.shape()));
    }
}

Var Graph::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::param(Tensor& param) {
    Node n;
    n.value = param;
    n.value.requires_grad = false;
    n.value.grad.reset();
    n.param = &param;
    n.needs_grad = param.requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::matmul(Var a, Var b) {
    const auto& ta = value(a);
    const auto& tb = value(b);
    if (ta.cols() != tb.rows()) {
        throw ShapeError("matmul: inner extents differ " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
    }
    const std::size_t m = ta.rows(), k = ta.cols(), n = tb.cols();
    Tensor out(matrix_shape(m, n));
    gemm_nn(ta.storage().data(), tb.storage().data(), out.storage().data(), m, k, n);
    return push(std::move(out), {a.id, b.id}, [a, b, m, k, n](Graph& g, const Node& self) {
        const double* go = self.grad.data();
        if (g.nodes_[a.id].needs_grad) {
            gemm_nt(go, g.value(b).storage().data(), g.grad_of(a.id).data(), m, n, k);
        }
        if (g.nodes_[b.id].needs_grad) {
            gemm_tn(g.value(a).storage().data(), go, g.grad_of(b.id).data(), m, k, n);
        }
    });
}

Var Graph::matmul_nt(Var a, Var b) {
    const auto& ta = value(a);
    const auto& tb = value(b);
    if (ta.cols() != tb.cols()) {
        throw ShapeError("matmul_nt: inner extents differ " + shape_str(ta.shape()) + " x " +
                         shape_str(tb.shape()) + "^T");
    }
    const std::size_t m = ta.rows(), k = ta.cols(), n = tb.rows();
    Tensor out(matrix_shape(m, n));
    gemm_nt(ta.storage().data(), tb.storage().data(), out.storage().data(), m, k, n);
    return push(std::move(out), {a.id, b.id}, [a, b, m, k, n](Graph& g, const Node& self) {
        const double* go = self.grad.data();
        // dA = G B, dB = G^T A
        if (g.nodes_[a.id].needs_grad) {
            gemm_nn(go, g.value(b).storage().data(), g.grad_of(a.id).data(), m, n, k);
        }
        if (g.nodes_[b.id].needs_grad) {
            gemm_tn(go, g.value(a).storage().data(), g.grad_of(b.id).data(), m, n, k);
        }
    });
}

Var Graph::transpose(Var a) {
    const auto& ta = value(a);
    const std::size_t m = ta.rows(), n = ta.cols();
    Tensor out(matrix_shape(n, m));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = ta(i, j);
    return push(std::move(out), {a.id}, [a, m, n](Graph& g, const Node& self) {
        auto& ga = g.grad_of(a.id);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
    });
}

Var Graph::elementwise_binary(std::string_view op, Var a, Var b, bool multiply, double sign) {
    const auto& ta = value(a);
    const auto& tb = value(b);
    const Broadcast mode = broadcast_mode(op, ta, tb);
    const std::size_t cols = ta.cols();
    Tensor out(ta.shape());
    auto& o = out.storage();
    const auto& av = ta.storage();
    const auto& bv = tb.storage();
    auto b_at = [&](std::size_t i) {
        switch (mode) {
            case Broadcast::kSame: return bv[i];
            case Broadcast::kRow: return bv[i % cols];
            default: return bv[0];
        }
    };
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = multiply ? av[i] * b_at(i) : av[i] + sign * b_at(i);
    return push(std::move(out), {a.id, b.id}, [a, b, mode, cols, multiply, sign](Graph& g, const Node& self) {
        const auto& go = self.grad;
        const auto& av = g.value(a).storage();
        const auto& bv = g.value(b).storage();
        auto bidx = [&](std::size_t i) -> std::size_t {
            switch (mode) {
                case Broadcast::kSame: return i;
                case Broadcast::kRow: return i % cols;
                default: return 0;
            }
        };
        if (g.nodes_[a.id].needs_grad) {
            auto& ga = g.grad_of(a.id);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += multiply ? go[i] * bv[bidx(i)] : go[i];
        }
        if (g.nodes_[b.id].needs_grad) {
            auto& gb = g.grad_of(b.id);
            for (std::size_t i = 0; i < go.size(); ++i) gb[bidx(i)] += multiply ? go[i] * av[i] : sign * go[i];
        }
    });
}

Var Graph::add(Var a, Var b) { return elementwise_binary("add", a, b, false, 1.0); }
Var Graph::sub(Var a, Var b) { return elementwise_binary("sub", a, b, false, -1.0); }
Var Graph::mul(Var a, Var b) { return elementwise_binary("mul", a, b, true, 1.0); }

Var Graph::scale(Var a, double c) {
    Tensor out = value(a);
    for (auto& v : out.storage()) v *= c;
    return push(std::move(out), {a.id}, [a, c](Graph& g, const Node& self) {
        auto& ga = g.grad_of(a.id);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * self.grad[i];
    });
}

Var Graph::add_scalar(Var a, double c) {
    Tensor out = value(a);
    for (auto& v : out.storage()) v += c;
    return push(std::move(out), {a.id}, [a](Graph& g, const Node& self) {
        auto& ga = g.grad_of(a.id);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
}

Var Graph::concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t rows = value(parts[0]).rows();
    std::size_t cols = 0;
    std::vector<std::size_t> widths;
    std::vector<std::uint32_t> ids;
    for (auto p : parts) {
        if (value(p).rows() != rows) throw ShapeError("concat_cols: row counts differ");
        widths.push_back(value(p).cols());
        cols += widths.back();
        ids.push_back(p.id);
    }
    Tensor out(matrix_shape(rows, cols));
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& t = value(parts[k]);
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(t.storage().data() + r * widths[k], widths[k], &out(r, off));
        off += widths[k];
    }
    return push(std::move(out), ids, [ids, widths, rows, cols](Graph& g, const Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (g.nodes_[ids[k]].needs_grad) {
                auto& gk = g.grad_of(ids[k]);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < widths[k]; ++j) gk[r * widths[k] + j] += self.grad[r * cols + off + j];
            }
            off += widths[k];
        }
    });
}

Var Graph::concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t cols = value(parts[0]).cols();
    std::size_t rows = 0;
    std::vector<std::size_t> sizes;
    std::vector<std::uint32_t> ids;
    for (auto p : parts) {
        if (value(p).cols() != cols) throw ShapeError("concat_rows: column counts differ");
        rows += value(p).rows();
        sizes.push_back(value(p).numel());
        ids.push_back(p.id);
    }
    std::vector<double> data;
    data.reserve(rows * cols);
    for (auto p : parts) data.insert(data.end(), value(p).storage().begin(), value(p).storage().end());
    return push(Tensor(matrix_shape(rows, cols), std::move(data)), ids, [ids, sizes](Graph& g, const Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (g.nodes_[ids[k]].needs_grad) {
                auto& gk = g.grad_of(ids[k]);
                for (std::size_t i = 0; i < sizes[k]; ++i) gk[i] += self.grad[off + i];
            }
            off += sizes[k];
        }
    });
}

Var Graph::slice_rows(Var a, std::size_t begin, std::size_t end) {
    const auto& ta = value(a);
    if (begin > end || end > ta.rows()) throw ShapeError("slice_rows: range out of bounds");
    const std::size_t cols = ta.cols();
    std::vector<double> data(ta.storage().begin() + begin * cols, ta.storage().begin() + end * cols);
    return push(Tensor(matrix_shape(end - begin, cols), std::move(data)), {a.id},
                [a, begin, cols](Graph& g, const Node& self) {
                    auto& ga = g.grad_of(a.id);
                    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[begin * cols + i] += self.grad[i];
                });
}

Var Graph::slice_cols(Var a, std::size_t begin, std::size_t end) {
    const auto& ta = value(a);
    if (begin > end || end > ta.cols()) throw ShapeError("slice_cols: range out of bounds");
    const std::size_t rows = ta.rows(), cols = ta.cols(), w = end - begin;
    Tensor out(matrix_shape(rows, w));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) out(r, j) = ta(r, begin + j);
    return push(std::move(out), {a.id}, [a, begin, rows, cols, w](Graph& g, const Node& self) {
        auto& ga = g.grad_of(a.id);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) ga[r * cols + begin + j] += self.grad[r * w + j];
    });
}

Var Graph::softmax(Var a) {
    const auto& ta = value(a);
    const std::size_t rows = ta.rows(), cols = ta.cols();
    Tensor out(ta.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const auto in = ta.row(r);
        auto o = out.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += (o[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < cols; ++j) o[j] /= s;
    }
    return push(std::move(out), {a.id}, [a, rows, cols](Graph& g, const Node& self) {
        auto& ga = g.grad_of(a.id);
        const auto& y = self.value.storage();
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += self.grad[r * cols + j] * y[r * cols + j];
            for (std::size_t j = 0; j < cols; ++j)
                ga[r * cols + j] += y[r * cols + j] * (self.grad[r * cols + j] - dot);
        }
    });
}

Var Graph::log_softmax(Var a) {
    const auto& ta = value(a);
    const std::size_t rows = ta.rows(), cols = ta.cols();
    Tensor out(ta.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const auto in = ta.row(r);
        auto o = out.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += std::exp(in[j] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < cols; ++j) o[j] = in[j] - lse;
    }
    return push(std::move(out), {a.id}, [a, rows, cols](Graph& g, const Node& self) {
        auto& ga = g.grad_of(a.id);
        const auto& y = self.value.storage();
        for (std::size_t r = 0; r < rows; ++r) {
            double gs = 0.0;
            for (std::size_t j = 0; j < cols; ++j) gs += self.grad[r * cols + j];
            for (std::size_t j = 0; j < cols; ++j)
                ga[r * cols + j] += self.grad[r * cols + j] - std::exp(y[r * cols + j]) * gs;
        }
    });
}


#define P4D_UNARY(NAME, FORWARD, DERIV)                                                   \
    Var Graph::NAME(Var a) {                                                              \
        Tensor out = value(a);                                                            \
        for (auto& x : out.storage()) { x = (FORWARD); }                                  \
        return push(std::move(out), {a.id}, [a](Graph& g, const Node& self) {            \
            auto& ga = g.grad_of(a.id);                                                   \
            const auto& xs = g.value(a).storage();                                        \
            const auto& ys = self.value.storage();                                        \
            for (std::size_t i = 0; i < ga.size(); ++i) {                                 \
                [[maybe_unused]] const double x = xs[i];                                  \
                [[maybe_unused]] const double y = ys[i];                                  \
                ga[i] += self.grad[i] * (DERIV);                                          \
            }                                                                             \
        });                                                                               \
    }

P4D_UNARY(sigmoid, x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)), y * (1.0 - y))
P4D_UNARY(relu, x > 0 ? x : 0.0, x > 0 ? 1.0 : 0.0)
P4D_UNARY(softplus, x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)),
          x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)))
P4D_UNARY(sin, std::sin(x), std::cos(x))
P4D_UNARY(cos, std::cos(x), -std::sin(x))
P4D_UNARY(log, std::log(x), 1.0 / x)
P4D_UNARY(reciprocal, 1.0 / x, -y * y)

#undef P4D_UNARY

Var Graph::layer_norm(Var a, double eps) {
    const auto& ta = value(a);
    const std::size_t rows = ta.rows(), cols = ta.cols();
    Tensor out(ta.shape());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto in = ta.row(r);
        double mu = 0.0;
        for (double v : in) mu += v;
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (double v : in) var += (v - mu) * (v - mu);
        var /= static_cast<double>(cols);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        auto o = out.row(r);
        for (std::size_t j = 0; j < cols; ++j) o[j] = (in[j] - mu) * inv_std[r];
    }
    return push(std::move(out), {a.id}, [a, rows, cols, inv_std](Graph& g, const Node& self) {
        auto& ga = g.grad_of(a.id);
        const auto& xh = self.value.storage();
        const double n = static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
            double gm = 0.0, gx = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
                gm += self.grad[r * cols + j];
                gx += self.grad[r * cols + j] * xh[r * cols + j];
            }
            gm /= n;
            gx /= n;
            for (std::size_t j = 0; j < cols; ++j)
                ga[r * cols + j] += inv_std[r] * (self.grad[r * cols + j] - gm - xh[r * cols + j] * gx);
        }
    });
}

Var Graph::sum(Var a) {
    double s = 0.0;
    for (double v : value(a).storage()) s += v;
    return push(Tensor::scalar(s), {a.id}, [a](Graph& g, const Node& self) {
        auto& ga = g.grad_of(a.id);
        for (auto& v : ga) v += self.grad[0];
    });
}

Var Graph::mean(Var a) {
    const double n = static_cast<double>(value(a).numel());
    if (n == 0) throw ShapeError("mean: empty tensor");
    double s = 0.0;
    for (double v : value(a).storage()) s += v;
    return push(Tensor::scalar(s / n), {a.id}, [a, n](Graph& g, const Node& self) {
        auto& ga = g.grad_of(a.id);
        for (auto& v : ga) v += self.grad[0] / n;
    });
}

Var Graph::sum_rows(Var a) {
    const auto& ta = value(a);
    const std::size_t rows = ta.rows(), cols = ta.cols();
    Tensor out(matrix_shape(1, cols));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) out(0, j) += ta(r, j);
    return push(std::move(out), {a.id}, [a, rows, cols](Graph& g, const Node& self) {
        auto& ga = g.grad_of(a.id);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] += self.grad[j];
    });
}

Var Graph::sparse(Var a, std::shared_ptr<const SparseRows> map) {
    Tensor out = apply(*map, value(a));
    const std::size_t d = value(a).cols();
    return push(std::move(out), {a.id}, [a, map, d](Graph& g, const Node& self) {
        auto& ga = g.grad_of(a.id);
        for (std::size_t r = 0; r < map->out_rows(); ++r) {
            const double* src = self.grad.data() + r * d;
            for (auto k = map->offsets[r]; k < map->offsets[r + 1]; ++k) {
                const double w = map->weight[k];
                double* dst = ga.data() + static_cast<std::size_t>(map->index[k]) * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += w * src[j];
            }
        }
    });
}

void Graph::backward(Var loss) {
    if (value(loss).numel() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(value(loss).shape()));
    }
    for (auto& n : nodes_) n.grad.clear();
    grad_of(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty() || !n.needs_grad) continue;
        if (n.param) {
            n.param->accumulate_grad(n.grad);
        } else if (n.backprop) {
            n.backprop(*this, n);
        }
    }
}

}  // namespace p4d::ad
