#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "p4d/geometry/geometry.hpp"
#include "p4d/util/binio.hpp"
#include "json.hpp"

namespace p4d::synth {

using Rgb = std::array<std::uint8_t, 3>;

enum class ClassRole { kGround, kStructure, kActor };

struct ClassInfo {
    std::string name;
    ClassRole role = ClassRole::kGround;
    Rgb color{128, 128, 128};
    double intensity = 0.5;
    std::array<double, 3> size{1, 1, 1};  // nominal length, width, height for actors

    bool thing() const { return role == ClassRole::kActor; }
    bool operator==(const ClassInfo&) const = default;
};

std::vector<ClassInfo> default_palette();

struct LidarConfig {
    int beams = 32;
    int azimuth_steps = 360;
    double min_elevation_deg = -30.0;
    double max_elevation_deg = 2.0;
    double max_range = 22.0;
    double sensor_height = 1.8;
    int points_per_frame = 1000;  // stuff points are subsampled to fill this budget
    int max_points_per_actor = 150;
    bool operator==(const LidarConfig&) const = default;
};

struct CameraSpec {
    double yaw = 0.0;  // radians
    double hfov = 1.5707963267948966;
    int height = 64;
    int width = 128;
    bool operator==(const CameraSpec&) const = default;
};

struct SceneConfig {
    int frames = 8;
    int min_actors = 2;
    int max_actors = 5;
    std::vector<ClassInfo> classes = default_palette();
    LidarConfig lidar;
    std::vector<CameraSpec> cameras = {{0.0}, {1.5707963267948966}, {-1.5707963267948966}};
    int structures = 2;
    double actor_min_range = 5.0;
    double actor_max_range = 14.0;
    double min_speed = 0.3;  // metres per frame
    double max_speed = 1.0;
    double occlusion_probability = 0.0;
    int occlusion_min_frames = 1;
    int occlusion_max_frames = 3;
    double intensity_noise = 0.05;
    double actor_hue_jitter = 20.0;  // per-actor colour offset in RGB units
    bool operator==(const SceneConfig&) const = default;

    void validate() const;
};

class ConfigError : public std::invalid_argument {
public:
    ConfigError(const std::string& field, const std::string& what)
        : std::invalid_argument(field + ": " + what), field_(field) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

struct Pose2 {
    double x = 0, y = 0, yaw = 0;
    bool operator==(const Pose2&) const = default;
};

struct Box {
    geom::Vec3 center{0, 0, 0};
    std::array<double, 3> size{1, 1, 1};
    double yaw = 0;
    bool contains(const geom::Vec3& p, double tol = 0.0) const;
    bool operator==(const Box&) const = default;
};

struct ActorTrack {
    std::uint32_t track_id = 0;
    std::uint16_t cls = 0;
    std::array<double, 3> size{1, 1, 1};
    Rgb color{0, 0, 0};
    std::vector<Pose2> poses;
    std::vector<bool> visible;
    bool operator==(const ActorTrack&) const = default;
};

struct Structure {
    std::uint16_t cls = 0;
    Box box;
    bool operator==(const Structure&) const = default;
};

struct LidarPoint {
    float x = 0, y = 0, z = 0, intensity = 0;
    bool operator==(const LidarPoint&) const = default;
};

struct Image {
    int height = 0, width = 0;
    std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
    bool operator==(const Image&) const = default;
};

struct Frame {
    std::vector<LidarPoint> points;
    std::vector<std::uint16_t> cls;
    std::vector<std::uint32_t> track;
    std::vector<Image> images;  // one per camera
    bool operator==(const Frame&) const = default;
};

struct Scene {
    std::uint64_t seed = 0;
    SceneConfig config;
    std::vector<geom::CameraModel> cameras;
    std::vector<ActorTrack> actors;
    std::vector<Structure> structures;
    std::vector<Frame> frames;

    std::size_t frame_count() const { return frames.size(); }
    double ground_z() const { return -config.lidar.sensor_height; }
    Box actor_box(const ActorTrack& a, std::size_t frame) const;
    bool operator==(const Scene& o) const;
};

Scene generate_scene(const SceneConfig& config, std::uint64_t seed);

struct RenderedView {
    Image image;
    std::vector<std::int32_t> actor_index;  // per pixel, -1 when no actor is hit
};
RenderedView render_camera(const Scene& scene, std::size_t frame, const geom::CameraModel& cam);

// Two consecutive frames (t-1, t) in model coordinates with the camera
// images of frame t.
struct PointCloudClip {
    std::array<std::size_t, 2> frames{0, 1};
    std::vector<geom::Vec3> xyz;
    std::vector<double> intensity;
    std::vector<double> timestamp;  // -1 for frame t-1, 0 for frame t
    std::vector<std::uint16_t> cls;
    std::vector<std::uint32_t> track;
    std::vector<std::uint32_t> source_index;  // index of the point inside its source frame
    std::array<std::vector<Box>, 2> boxes;     // ground-truth actor boxes per frame
    std::array<std::vector<std::uint32_t>, 2> box_track;
    std::vector<geom::CameraModel> cameras;
    std::vector<Image> images;

    std::size_t size() const { return xyz.size(); }
    // 0 for frame t-1, 1 for frame t.
    int slot(std::size_t i) const { return timestamp[i] < -0.5 ? 0 : 1; }
};

PointCloudClip make_clip(const Scene& scene, std::size_t t);

struct AugmentParams {
    double rotation_min = 0.0;
    double rotation_max = 0.0;
    double jitter_sigma = 0.0;
    std::int64_t point_budget = std::numeric_limits<std::int64_t>::max();  // must be positive
    double brightness_sigma = 0.0;
};
PointCloudClip augment_clip(const PointCloudClip& clip, const AugmentParams& params, std::uint64_t seed);

using DatasetError = util::FormatError;

void write_dataset(const Scene& scene, const std::filesystem::path& dir);
Scene read_dataset(const std::filesystem::path& dir);

nlohmann::json scene_config_to_json(const SceneConfig& cfg);
// Missing keys take defaults; unknown keys raise ConfigError.
SceneConfig scene_config_from_json(const nlohmann::json& j);

void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

}  // namespace p4d::synth
