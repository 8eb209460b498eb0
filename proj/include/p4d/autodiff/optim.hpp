#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "p4d/autodiff/graph.hpp"
#include "p4d/autodiff/tensor.hpp"

namespace p4d::ad {

// Named parameter collection. std::map keeps element addresses stable and
// iteration order deterministic, which checkpoints and the optimizer rely on.
class ParameterSet {
public:
    Tensor& add(const std::string& name, Shape shape, double fill = 0.0);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    std::map<std::string, Tensor>& items() { return params_; }
    const std::map<std::string, Tensor>& items() const { return params_; }
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;

    void zero_grad();
    void set_requires_grad(bool on, const std::string& prefix = "");
    // FNV-1a over names, shapes and raw value bytes.
    std::uint64_t checksum() const;

private:
    std::map<std::string, Tensor> params_;
};

// Deterministic initialisers driven by a 64-bit seed.
void init_normal(Tensor& t, double stddev, std::uint64_t seed);
void init_uniform(Tensor& t, double bound, std::uint64_t seed);

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class NonFiniteGradient : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Decoupled weight-decay Adam. Parameters are grouped by name prefix; the
// first matching prefix decides the group's learning rate.
class AdamW {
public:
    struct Group {
        std::string prefix;
        double lr;
    };

    AdamW(ParameterSet& params, AdamWConfig config, std::vector<Group> groups = {});

    // Applies one update using the gradients stored on each parameter.
    void step();
    void set_lr_scale(double s) { lr_scale_ = s; }
    std::int64_t step_count() const { return step_; }
    const AdamWConfig& config() const { return config_; }

    // Moments for a parameter (exposed for tests).
    const std::vector<double>& first_moment(const std::string& name) const { return slots_.at(name).m; }
    const std::vector<double>& second_moment(const std::string& name) const { return slots_.at(name).v; }

private:
    struct Slot {
        Tensor* param;
        double lr;
        std::vector<double> m, v;
    };
    AdamWConfig config_;
    std::map<std::string, Slot> slots_;
    std::int64_t step_ = 0;
    double lr_scale_ = 1.0;
};

// Multiplies the base rate by gamma once for every milestone already reached.
double step_decay(double base_lr, int epoch, std::span<const int> milestones, double gamma = 0.1);

// Checkpoint = <base>.bin (little-endian float64 values, concatenated) and
// <base>.idx (one "name rank d0 d1 ... offset" line per parameter).
void save_checkpoint(const std::string& base, const ParameterSet& params);
void load_checkpoint(const std::string& base, ParameterSet& params);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// With `max_entries` > 0 only an evenly strided subset of that many
// coordinates is perturbed.
double finite_diff_check(const std::function<Var(Graph&)>& build_loss, Tensor& param, double step = 1e-5,
                         std::size_t max_entries = 0);

}  // namespace p4d::ad
