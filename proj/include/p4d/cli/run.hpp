#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "p4d/decoder/decoder.hpp"
#include "p4d/metrics/metrics.hpp"
#include "p4d/supervision/supervision.hpp"
#include "p4d/synthworld/scene.hpp"
#include "p4d/tracking/tracking.hpp"

namespace p4d::cli {

namespace fs = std::filesystem;

inline constexpr const char* kCodeVersion = "0.1.0";

// Exit-code contract shared by every command.
enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kDivergence = 4, kMismatch = 5 };

using ConfigError = synth::ConfigError;

struct ModelSection {
    std::size_t dim = 32;
    std::size_t queries = 32;
    double voxel_size = 0.1;
    bool use_images = true;
    bool use_mask_bias = true;
    // Fixed by the architecture; present so that configs state them.
    int blocks = 4;
    std::vector<int> voxel_strides{1, 2, 4, 8};
    std::vector<int> image_strides{4, 8};
    int clip_length = 2;
};

struct TrainingSection {
    std::int64_t steps = 500;
    std::optional<std::int64_t> epochs;  // overrides `steps` as epochs x clips
    double lr_lidar = 3e-3;
    double lr_rest = 1e-4;
    double weight_decay = 0.0;
    std::vector<int> decay_epochs{30, 60};
    double decay_gamma = 0.1;
    bool augment = false;
    std::uint64_t seed = 0;
    sup::LossWeights weights;
    double no_object_weight = 0.1;
};

struct TamSection {
    std::int64_t steps = 300;
    std::size_t batch = 64;
    double lr = 1e-3;
    std::vector<int> gaps{1, 2, 3, 4};
    std::uint64_t seed = 0;
};

struct TrackingSection {
    double tau = 0.5;
    int history = 4;
    double iou_threshold = 0.5;
};

struct DataSection {
    int scenes = 4;
    std::uint64_t seed = 0;
    synth::SceneConfig scene;
};

struct PathSection {
    std::string dataset, stage1, tam;
};

struct RunConfig {
    ModelSection model;
    TrainingSection training;
    TamSection tam;
    TrackingSection tracking;
    DataSection data;
    PathSection paths;

    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);  // unknown keys raise ConfigError

    dec::ModelConfig model_config() const;
    sup::TrainConfig train_config() const;
    track::TamTrainConfig tam_config() const;
    track::TrackingConfig tracking_config(bool baseline_iou) const;
    metrics::MetricConfig metric_config() const;
};

// Applies `a.b.c=value` onto a JSON document; the value is parsed as JSON
// when possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);
// Reads `path` (empty for defaults), applies overrides, then validates.
RunConfig load_config(const fs::path& path, const std::vector<std::string>& overrides = {});

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);
// Hash over the sorted relative paths and contents of every regular file
// under `dir`, skipping run manifests.
std::uint64_t hash_tree(const fs::path& dir);

struct RunManifest {
    std::string command;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::string code_version = kCodeVersion;
    std::map<std::string, std::string> inputs;  // role -> content hash
    std::vector<std::pair<std::string, std::string>> outputs;  // file -> content hash
    std::map<std::string, double> timings;  // seconds
    nlohmann::json config;

    nlohmann::json to_json() const;
};
inline constexpr const char* kManifestName = "run_manifest.json";
// Writes via a temporary file and a rename.
void write_manifest(const fs::path& dir, RunManifest manifest);

// Scene directories of a dataset: either `dir` itself (one scene) or the
// entries listed in `dir/dataset.json`.
std::vector<fs::path> scene_dirs(const fs::path& dir);
std::vector<synth::Scene> load_scenes(const fs::path& dir);

void cmd_generate(const RunConfig& cfg, const fs::path& out);
void cmd_train(const RunConfig& cfg, const fs::path& dataset, const fs::path& out);
void cmd_train_tam(const RunConfig& cfg, const fs::path& dataset, const fs::path& stage1, const fs::path& out);
void cmd_infer(const RunConfig& cfg, const fs::path& stage1, const fs::path& tam, const fs::path& scenes,
               const fs::path& out, bool baseline_iou);

struct EvalResult {
    metrics::MetricReport report;
    std::optional<double> oracle_discrepancy;  // set when the oracle ran
    std::size_t oracle_scenes_checked = 0, oracle_scenes_skipped = 0;
};
// Pools all scenes into one evaluation; track ids are made unique per scene.
// The oracle runs per scene on scenes of at most `kOracleMaxPoints` points.
inline constexpr std::size_t kOracleMaxPoints = 4000;
EvalResult cmd_eval(const fs::path& pred, const fs::path& gt, const fs::path& out, bool oracle);

void cmd_report(const std::vector<fs::path>& logs, const std::vector<fs::path>& reports, const fs::path& out);

// Runs `body`, printing the error and mapping exception types onto the exit-code contract.
int run_guarded(const std::function<void()>& body);

}  // namespace p4d::cli
