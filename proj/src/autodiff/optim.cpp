#include "p4d/autodiff/optim.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "p4d/util/binio.hpp"
#include "p4d/util/rng.hpp"

namespace p4d::ad {

Tensor& ParameterSet::add(const std::string& name, Shape shape, double fill) {
    auto [it, inserted] = params_.emplace(name, Tensor(std::move(shape), fill));
    if (!inserted) throw std::invalid_argument("duplicate parameter name: " + name);
    it->second.requires_grad = true;
    return it->second;
}

Tensor& ParameterSet::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
}

void ParameterSet::zero_grad() {
    for (auto& [_, t] : params_) t.grad.reset();
}

void ParameterSet::set_requires_grad(bool on, const std::string& prefix) {
    for (auto& [name, t] : params_)
        if (name.rfind(prefix, 0) == 0) t.requires_grad = on;
}

std::uint64_t ParameterSet::checksum() const {
    util::Fnv1a h;
    for (const auto& [name, t] : params_) {
        h.update(name);
        for (auto e : t.shape()) h.update_value(static_cast<std::uint64_t>(e));
        for (double v : t.storage()) h.update_value(v);
    }
    return h.digest();
}

void init_normal(Tensor& t, double stddev, std::uint64_t seed) {
    util::Rng rng(seed);
    for (auto& v : t.storage()) v = stddev * rng.normal();
}

void init_uniform(Tensor& t, double bound, std::uint64_t seed) {
    util::Rng rng(seed);
    for (auto& v : t.storage()) v = rng.uniform(-bound, bound);
}

AdamW::AdamW(ParameterSet& params, AdamWConfig config, std::vector<Group> groups) : config_(config) {
    for (auto& [name, t] : params.items()) {
        double lr = config_.lr;
        for (const auto& g : groups) {
            if (name.rfind(g.prefix, 0) == 0) {
                lr = g.lr;
                break;
            }
        }
        slots_.emplace(name, Slot{&t, lr, std::vector<double>(t.numel(), 0.0), std::vector<double>(t.numel(), 0.0)});
    }
}

void AdamW::step() {
    for (auto& [name, s] : slots_) {
        if (!s.param->grad) continue;
        for (double g : *s.param->grad) {
            if (!std::isfinite(g)) throw NonFiniteGradient("non-finite gradient for parameter " + name);
        }
    }
    ++step_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (auto& [name, s] : slots_) {
        Tensor& p = *s.param;
        if (!p.requires_grad || !p.grad) continue;
        const auto& g = *p.grad;
        const double lr = s.lr * lr_scale_;
        auto& x = p.storage();
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] -= lr * config_.weight_decay * x[i];
            s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
            s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
            const double mh = s.m[i] / c1;
            const double vh = s.v[i] / c2;
            x[i] -= lr * mh / (std::sqrt(vh) + config_.eps);
        }
    }
}

double step_decay(double base_lr, int epoch, std::span<const int> milestones, double gamma) {
    double lr = base_lr;
    for (int m : milestones)
        if (epoch >= m) lr *= gamma;
    return lr;
}

namespace {

void write_le_double(std::ostream& os, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

double read_le_double(const unsigned char* b) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const std::string& base, const ParameterSet& params) {
    std::ofstream bin(base + ".bin", std::ios::binary | std::ios::trunc);
    std::ofstream idx(base + ".idx", std::ios::trunc);
    if (!bin || !idx) throw util::IoError("cannot open checkpoint for writing: " + base);
    std::size_t offset = 0;
    for (const auto& [name, t] : params.items()) {
        idx << name << ' ' << t.rank();
        for (auto e : t.shape()) idx << ' ' << e;
        idx << ' ' << offset << '\n';
        for (double v : t.storage()) write_le_double(bin, v);
        offset += t.numel();
    }
    if (!bin || !idx) throw util::IoError("failed writing checkpoint: " + base);
}

void load_checkpoint(const std::string& base, ParameterSet& params) {
    std::ifstream idx(base + ".idx");
    std::ifstream bin(base + ".bin", std::ios::binary);
    if (!idx || !bin) throw util::IoError("cannot open checkpoint: " + base);
    std::vector<unsigned char> raw((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    if (raw.size() % 8 != 0) throw util::IoError(base + ".bin: truncated (size not a multiple of 8)");
    std::string line;
    std::size_t seen = 0;
    while (std::getline(idx, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name;
        std::size_t rank = 0;
        ls >> name >> rank;
        Shape shape(rank);
        for (auto& e : shape) ls >> e;
        std::size_t offset = 0;
        ls >> offset;
        if (!ls) throw util::IoError(base + ".idx: malformed line '" + line + "'");
        Tensor& t = params.at(name);
        if (t.shape() != shape) {
            throw ShapeError(base + ": parameter " + name + " has shape " + shape_str(shape) + ", model expects " +
                             shape_str(t.shape()));
        }
        if ((offset + t.numel()) * 8 > raw.size()) {
            throw util::IoError(base + ".bin: truncated at offset " + std::to_string(offset * 8));
        }
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = read_le_double(raw.data() + (offset + i) * 8);
        ++seen;
    }
    if (seen != params.size()) {
        throw util::IoError(base + ".idx: lists " + std::to_string(seen) + " parameters, model has " +
                                 std::to_string(params.size()));
    }
}

double finite_diff_check(const std::function<Var(Graph&)>& build_loss, Tensor& param, double step,
                         std::size_t max_entries) {
    const bool had = param.requires_grad;
    param.requires_grad = true;
    param.grad.reset();
    {
        Graph g;
        Var loss = build_loss(g);
        g.backward(loss);
    }
    const std::vector<double> analytic = param.grad ? *param.grad : std::vector<double>(param.numel(), 0.0);
    param.grad.reset();
    auto eval = [&]() {
        Graph g;
        return g.value(build_loss(g)).item();
    };
    double worst = 0.0;
    const std::size_t n = param.numel();
    const std::size_t stride = max_entries > 0 && n > max_entries ? (n + max_entries - 1) / max_entries : 1;
    for (std::size_t i = 0; i < n; i += stride) {
        const double orig = param[i];
        param[i] = orig + step;
        const double up = eval();
        param[i] = orig - step;
        const double down = eval();
        param[i] = orig;
        const double numeric = (up - down) / (2.0 * step);
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    param.requires_grad = had;
    return worst;
}

}  // namespace p4d::ad
