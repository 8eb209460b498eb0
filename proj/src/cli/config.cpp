#include <cstdio>
#include <set>

#include "p4d/cli/run.hpp"

namespace p4d::cli {

using nlohmann::json;

namespace {

// Strict reader over one JSON object: every key must be consumed.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where(""), "expected an object");
    }

    template <class T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where(key), std::string("wrong type: ") + e.what());
        }
    }
    template <class T>
    void read(const char* key, std::optional<T>& out) {
        seen_.insert(key);
        if (!j_.contains(key) || j_.at(key).is_null()) return;
        T v{};
        read(key, v);
        out = v;
    }
    bool has(const char* key) {
        seen_.insert(key);
        return j_.contains(key);
    }
    const json& at(const char* key) const { return j_.at(key); }
    std::string where(const std::string& key) const { return path_.empty() ? key : key.empty() ? path_ : path_ + "." + key; }

    void finish() const {
        for (const auto& [k, _] : j_.items())
            if (!seen_.count(k)) throw ConfigError(where(k), "unknown key");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void require(bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError(field, what);
}

}  // namespace

void RunConfig::validate() const {
    require(model.dim >= 2 && model.dim % 2 == 0, "model.dim", "must be an even number >= 2");
    require(model.queries >= 1, "model.queries", "must be positive");
    require(model.voxel_size > 0, "model.voxel_size", "must be positive");
    require(model.blocks == 4, "model.blocks", "the decoder has exactly 4 fusion blocks");
    require(model.voxel_strides == std::vector<int>{1, 2, 4, 8}, "model.voxel_strides", "must be [1, 2, 4, 8]");
    require(model.image_strides == std::vector<int>{4, 8}, "model.image_strides", "must be [4, 8]");
    require(model.clip_length == 2, "model.clip_length", "clips always hold 2 frames");

    require(training.steps >= 0, "training.steps", "must be non-negative");
    require(!training.epochs || *training.epochs >= 0, "training.epochs", "must be non-negative");
    require(training.lr_lidar > 0, "training.lr_lidar", "must be positive");
    require(training.lr_rest > 0, "training.lr_rest", "must be positive");
    require(training.weight_decay >= 0, "training.weight_decay", "must be non-negative");
    require(training.decay_gamma > 0, "training.decay_gamma", "must be positive");
    for (int e : training.decay_epochs) require(e > 0, "training.decay_epochs", "epochs must be positive");
    require(std::is_sorted(training.decay_epochs.begin(), training.decay_epochs.end()), "training.decay_epochs",
            "must be ascending");
    const auto& w = training.weights;
    require(w.ce >= 0 && w.dice >= 0 && w.cls >= 0 && w.pf >= 0, "training.weights", "must be non-negative");
    require(training.no_object_weight >= 0, "training.no_object_weight", "must be non-negative");

    require(tam.steps >= 0, "tam.steps", "must be non-negative");
    require(tam.batch >= 1, "tam.batch", "must be positive");
    require(tam.lr > 0, "tam.lr", "must be positive");
    require(!tam.gaps.empty(), "tam.gaps", "must not be empty");
    for (int g : tam.gaps) require(g > 0, "tam.gaps", "gaps must be positive");

    require(tracking.history >= 1, "tracking.history", "must be positive");
    require(tracking.tau >= 0, "tracking.tau", "must be non-negative");
    require(tracking.iou_threshold >= 0 && tracking.iou_threshold <= 1, "tracking.iou_threshold", "must be in [0, 1]");

    require(data.scenes >= 1, "data.scenes", "must be positive");
    try {
        data.scene.validate();
    } catch (const ConfigError& e) {
        throw ConfigError("data.scene." + e.field(), std::string(e.what()).substr(e.field().size() + 2));
    }
}

json RunConfig::to_json() const {
    const auto& w = training.weights;
    return {{"model",
             {{"dim", model.dim},
              {"queries", model.queries},
              {"voxel_size", model.voxel_size},
              {"use_images", model.use_images},
              {"use_mask_bias", model.use_mask_bias},
              {"blocks", model.blocks},
              {"voxel_strides", model.voxel_strides},
              {"image_strides", model.image_strides},
              {"clip_length", model.clip_length}}},
            {"training",
             {{"steps", training.steps},
              {"epochs", training.epochs ? json(*training.epochs) : json(nullptr)},
              {"lr_lidar", training.lr_lidar},
              {"lr_rest", training.lr_rest},
              {"weight_decay", training.weight_decay},
              {"decay_epochs", training.decay_epochs},
              {"decay_gamma", training.decay_gamma},
              {"augment", training.augment},
              {"seed", training.seed},
              {"weights", {{"ce", w.ce}, {"dice", w.dice}, {"cls", w.cls}, {"pf", w.pf}}},
              {"no_object_weight", training.no_object_weight}}},
            {"tam",
             {{"steps", tam.steps}, {"batch", tam.batch}, {"lr", tam.lr}, {"gaps", tam.gaps}, {"seed", tam.seed}}},
            {"tracking", {{"tau", tracking.tau}, {"history", tracking.history}, {"iou_threshold", tracking.iou_threshold}}},
            {"data", {{"scenes", data.scenes}, {"seed", data.seed}, {"scene", synth::scene_config_to_json(data.scene)}}},
            {"paths", {{"dataset", paths.dataset}, {"stage1", paths.stage1}, {"tam", paths.tam}}}};
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    Section root(j, "");
    if (root.has("model")) {
        Section s(root.at("model"), "model");
        s.read("dim", c.model.dim);
        s.read("queries", c.model.queries);
        s.read("voxel_size", c.model.voxel_size);
        s.read("use_images", c.model.use_images);
        s.read("use_mask_bias", c.model.use_mask_bias);
        s.read("blocks", c.model.blocks);
        s.read("voxel_strides", c.model.voxel_strides);
        s.read("image_strides", c.model.image_strides);
        s.read("clip_length", c.model.clip_length);
        s.finish();
    }
    if (root.has("training")) {
        Section s(root.at("training"), "training");
        s.read("steps", c.training.steps);
        s.read("epochs", c.training.epochs);
        s.read("lr_lidar", c.training.lr_lidar);
        s.read("lr_rest", c.training.lr_rest);
        s.read("weight_decay", c.training.weight_decay);
        s.read("decay_epochs", c.training.decay_epochs);
        s.read("decay_gamma", c.training.decay_gamma);
        s.read("augment", c.training.augment);
        s.read("seed", c.training.seed);
        s.read("no_object_weight", c.training.no_object_weight);
        if (s.has("weights")) {
            Section ws(s.at("weights"), "training.weights");
            ws.read("ce", c.training.weights.ce);
            ws.read("dice", c.training.weights.dice);
            ws.read("cls", c.training.weights.cls);
            ws.read("pf", c.training.weights.pf);
            ws.finish();
        }
        s.finish();
    }
    if (root.has("tam")) {
        Section s(root.at("tam"), "tam");
        s.read("steps", c.tam.steps);
        s.read("batch", c.tam.batch);
        s.read("lr", c.tam.lr);
        s.read("gaps", c.tam.gaps);
        s.read("seed", c.tam.seed);
        s.finish();
    }
    if (root.has("tracking")) {
        Section s(root.at("tracking"), "tracking");
        s.read("tau", c.tracking.tau);
        s.read("history", c.tracking.history);
        s.read("iou_threshold", c.tracking.iou_threshold);
        s.finish();
    }
    if (root.has("data")) {
        Section s(root.at("data"), "data");
        s.read("scenes", c.data.scenes);
        s.read("seed", c.data.seed);
        if (s.has("scene")) {
            try {
                c.data.scene = synth::scene_config_from_json(s.at("scene"));
            } catch (const ConfigError& e) {
                throw ConfigError("data.scene." + e.field(), std::string(e.what()).substr(e.field().size() + 2));
            }
        }
        s.finish();
    }
    if (root.has("paths")) {
        Section s(root.at("paths"), "paths");
        s.read("dataset", c.paths.dataset);
        s.read("stage1", c.paths.stage1);
        s.read("tam", c.paths.tam);
        s.finish();
    }
    root.finish();
    return c;
}

dec::ModelConfig RunConfig::model_config() const {
    dec::ModelConfig m;
    m.dim = model.dim;
    m.queries = model.queries;
    m.voxel_size = model.voxel_size;
    m.use_images = model.use_images;
    m.use_mask_bias = model.use_mask_bias;
    for (const auto& k : data.scene.classes) m.thing.push_back(k.thing());
    for (std::size_t i = 0; i < data.scene.classes.size(); ++i)
        if (data.scene.classes[i].role == synth::ClassRole::kGround) m.fallback_class = static_cast<std::uint16_t>(i);
    m.seed = training.seed;
    return m;
}

sup::TrainConfig RunConfig::train_config() const {
    sup::TrainConfig t;
    t.steps = training.steps;
    t.lr_lidar = training.lr_lidar;
    t.lr_rest = training.lr_rest;
    t.weight_decay = training.weight_decay;
    t.decay_epochs = training.decay_epochs;
    t.decay_gamma = training.decay_gamma;
    t.augment = training.augment;
    t.seed = training.seed;
    t.supervision.weights = training.weights;
    t.supervision.no_object_weight = training.no_object_weight;
    return t;
}

track::TamTrainConfig RunConfig::tam_config() const {
    track::TamTrainConfig t;
    t.steps = tam.steps;
    t.batch = tam.batch;
    t.lr = tam.lr;
    t.gaps = tam.gaps;
    t.seed = tam.seed;
    return t;
}

track::TrackingConfig RunConfig::tracking_config(bool baseline_iou) const {
    track::TrackingConfig t;
    t.tau = tracking.tau;
    t.history = tracking.history;
    t.iou_threshold = tracking.iou_threshold;
    t.baseline_iou = baseline_iou;
    return t;
}

metrics::MetricConfig RunConfig::metric_config() const {
    metrics::MetricConfig m;
    for (const auto& k : data.scene.classes) {
        m.thing.push_back(k.thing());
        m.names.push_back(k.name);
    }
    return m;
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key.path=value");
    const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError(path, "empty path component");
        if (!node->is_object()) throw ConfigError(path, "'" + key + "' is not inside an object");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
}

RunConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
    json doc = json::object();
    if (!path.empty()) {
        const auto raw = util::read_file(path);
        doc = json::parse(raw.begin(), raw.end(), nullptr, false);
        if (doc.is_discarded()) throw ConfigError(path.string(), "not valid JSON");
    }
    for (const auto& o : overrides) apply_override(doc, o);
    RunConfig c = RunConfig::from_json(doc);
    c.validate();
    return c;
}

}  // namespace p4d::cli
