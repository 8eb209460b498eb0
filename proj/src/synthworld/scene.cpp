#include "p4d/synthworld/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "p4d/util/rng.hpp"

namespace p4d::synth {

using geom::Vec3;

std::vector<ClassInfo> default_palette() {
    return {
        {"ground", ClassRole::kGround, {100, 100, 100}, 0.2, {0, 0, 0}},
        {"building", ClassRole::kStructure, {170, 150, 120}, 0.6, {0, 0, 0}},
        {"car", ClassRole::kActor, {200, 40, 40}, 0.8, {4.0, 1.9, 1.6}},
        {"van", ClassRole::kActor, {40, 70, 210}, 0.8, {4.0, 1.9, 1.6}},
        {"pedestrian", ClassRole::kActor, {230, 200, 40}, 0.4, {0.9, 0.9, 1.8}},
    };
}

void SceneConfig::validate() const {
    if (classes.empty()) throw ConfigError("classes", "at least one class is required");
    if (frames < 2) throw ConfigError("frames", "need at least 2 frames");
    if (min_actors < 0 || max_actors < min_actors) throw ConfigError("actors", "invalid actor count range");
    const auto count = [&](ClassRole r) {
        return std::count_if(classes.begin(), classes.end(), [&](const ClassInfo& c) { return c.role == r; });
    };
    if (count(ClassRole::kGround) != 1) throw ConfigError("classes", "exactly one ground class is required");
    if (max_actors > 0 && count(ClassRole::kActor) == 0)
        throw ConfigError("classes", "actors requested but no thing class in the palette");
    if (structures > 0 && count(ClassRole::kStructure) == 0)
        throw ConfigError("classes", "structures requested but no structure class in the palette");
    if (classes.size() > std::numeric_limits<std::uint16_t>::max()) throw ConfigError("classes", "too many classes");
    for (const auto& c : classes)
        if (c.thing() && (c.size[0] <= 0 || c.size[1] <= 0 || c.size[2] <= 0))
            throw ConfigError("classes", "actor class '" + c.name + "' needs a positive size");
    if (lidar.beams < 1 || lidar.azimuth_steps < 1) throw ConfigError("lidar", "beam grid must be non-empty");
    if (!(lidar.max_range > 0)) throw ConfigError("lidar.max_range", "must be positive");
    if (!(lidar.sensor_height > 0)) throw ConfigError("lidar.sensor_height", "must be positive");
    if (lidar.points_per_frame < 1) throw ConfigError("lidar.points_per_frame", "must be positive");
    if (lidar.max_points_per_actor < 1) throw ConfigError("lidar.max_points_per_actor", "must be positive");
    if (!(actor_min_range > 0) || actor_max_range < actor_min_range)
        throw ConfigError("actor_range", "invalid actor placement range");
    if (min_speed < 0 || max_speed < min_speed) throw ConfigError("speed", "invalid speed range");
    if (occlusion_probability < 0 || occlusion_probability > 1)
        throw ConfigError("occlusion_probability", "must be in [0, 1]");
    if (occlusion_min_frames < 1 || occlusion_max_frames < occlusion_min_frames)
        throw ConfigError("occlusion_frames", "invalid occlusion window range");
    for (const auto& cam : cameras) {
        if (cam.height <= 0 || cam.width <= 0) throw ConfigError("cameras", "image size must be positive");
        if (cam.height % 8 != 0 || cam.width % 8 != 0)
            throw ConfigError("cameras", "image size must be divisible by 8");
        if (!(cam.hfov > 0 && cam.hfov < std::numbers::pi)) throw ConfigError("cameras", "hfov must be in (0, pi)");
    }
}

bool Box::contains(const Vec3& p, double tol) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double dx = p[0] - center[0], dy = p[1] - center[1];
    const double lx = c * dx + s * dy, ly = -s * dx + c * dy, lz = p[2] - center[2];
    return std::abs(lx) <= size[0] / 2 + tol && std::abs(ly) <= size[1] / 2 + tol &&
           std::abs(lz) <= size[2] / 2 + tol;
}

Box Scene::actor_box(const ActorTrack& a, std::size_t frame) const {
    const Pose2& p = a.poses.at(frame);
    return Box{{p.x, p.y, ground_z() + a.size[2] / 2}, a.size, p.yaw};
}

bool Scene::operator==(const Scene& o) const {
    if (cameras.size() != o.cameras.size()) return false;
    for (std::size_t i = 0; i < cameras.size(); ++i) {
        const auto& a = cameras[i];
        const auto& b = o.cameras[i];
        if (a.fx != b.fx || a.fy != b.fy || a.cx != b.cx || a.cy != b.cy || a.rotation != b.rotation ||
            a.translation != b.translation || a.height != b.height || a.width != b.width)
            return false;
    }
    return seed == o.seed && config == o.config && actors == o.actors && structures == o.structures &&
           frames == o.frames;
}

namespace {

// Slab test in the box frame. Returns the entry distance along the ray or
// +inf when the ray misses.
double ray_box(const Vec3& origin, const Vec3& dir, const Box& box) {
    const double c = std::cos(box.yaw), s = std::sin(box.yaw);
    const double ox = origin[0] - box.center[0], oy = origin[1] - box.center[1];
    const std::array<double, 3> o{c * ox + s * oy, -s * ox + c * oy, origin[2] - box.center[2]};
    const std::array<double, 3> d{c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]};
    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 3; ++k) {
        const double h = box.size[k] / 2;
        if (std::abs(d[k]) < 1e-15) {
            if (std::abs(o[k]) > h) return std::numeric_limits<double>::infinity();
            continue;
        }
        double a = (-h - o[k]) / d[k], b = (h - o[k]) / d[k];
        if (a > b) std::swap(a, b);
        t0 = std::max(t0, a);
        t1 = std::min(t1, b);
        if (t0 > t1) return std::numeric_limits<double>::infinity();
    }
    return t0 > 0 ? t0 : std::numeric_limits<double>::infinity();
}

enum class HitKind { kNone, kGround, kStructure, kActor };

struct Hit {
    HitKind kind = HitKind::kNone;
    double t = std::numeric_limits<double>::infinity();
    std::size_t index = 0;
};

struct FrameGeometry {
    double ground_z;
    std::vector<const Structure*> structures;
    std::vector<Box> actor_boxes;
    std::vector<std::size_t> actor_index;
};

FrameGeometry frame_geometry(const Scene& scene, std::size_t frame) {
    FrameGeometry g;
    g.ground_z = scene.ground_z();
    for (const auto& s : scene.structures) g.structures.push_back(&s);
    for (std::size_t a = 0; a < scene.actors.size(); ++a) {
        if (!scene.actors[a].visible[frame]) continue;
        g.actor_boxes.push_back(scene.actor_box(scene.actors[a], frame));
        g.actor_index.push_back(a);
    }
    return g;
}

Hit cast(const FrameGeometry& g, const Vec3& origin, const Vec3& dir) {
    Hit hit;
    if (dir[2] < -1e-12) {
        const double t = (g.ground_z - origin[2]) / dir[2];
        if (t > 0) hit = {HitKind::kGround, t, 0};
    }
    for (std::size_t i = 0; i < g.structures.size(); ++i) {
        const double t = ray_box(origin, dir, g.structures[i]->box);
        if (t < hit.t) hit = {HitKind::kStructure, t, i};
    }
    for (std::size_t i = 0; i < g.actor_boxes.size(); ++i) {
        const double t = ray_box(origin, dir, g.actor_boxes[i]);
        if (t < hit.t) hit = {HitKind::kActor, t, g.actor_index[i]};
    }
    return hit;
}

std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

std::uint16_t class_with_role(const SceneConfig& cfg, ClassRole role) {
    for (std::size_t i = 0; i < cfg.classes.size(); ++i)
        if (cfg.classes[i].role == role) return static_cast<std::uint16_t>(i);
    return 0;
}

std::vector<std::uint16_t> classes_with_role(const SceneConfig& cfg, ClassRole role) {
    std::vector<std::uint16_t> out;
    for (std::size_t i = 0; i < cfg.classes.size(); ++i)
        if (cfg.classes[i].role == role) out.push_back(static_cast<std::uint16_t>(i));
    return out;
}

Rgb shade(const Rgb& c, double f) { return {clamp_byte(c[0] * f), clamp_byte(c[1] * f), clamp_byte(c[2] * f)}; }

void place_structures(Scene& scene, util::Rng& rng) {
    const auto cls = classes_with_role(scene.config, ClassRole::kStructure);
    const double ground = scene.ground_z();
    for (int i = 0; i < scene.config.structures; ++i) {
        // Spread structures around the sensor, beyond the actor ring.
        const double theta = 2 * std::numbers::pi * (i + rng.uniform(0.2, 0.8)) / scene.config.structures;
        const double r = rng.uniform(scene.config.actor_max_range + 4.0, scene.config.actor_max_range + 7.0);
        Structure s;
        s.cls = cls[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cls.size()) - 1))];
        s.box.size = {rng.uniform(6.0, 10.0), rng.uniform(2.0, 4.0), rng.uniform(3.0, 6.0)};
        s.box.center = {r * std::cos(theta), r * std::sin(theta), ground + s.box.size[2] / 2};
        s.box.yaw = theta + std::numbers::pi / 2;
        scene.structures.push_back(s);
    }
}

void place_actors(Scene& scene, util::Rng& rng) {
    const auto& cfg = scene.config;
    const auto thing = classes_with_role(cfg, ClassRole::kActor);
    const int n = cfg.max_actors > 0 ? static_cast<int>(rng.uniform_int(cfg.min_actors, cfg.max_actors)) : 0;
    const auto frames = static_cast<std::size_t>(cfg.frames);
    std::vector<std::array<double, 2>> starts;
    for (int a = 0; a < n; ++a) {
        ActorTrack actor;
        actor.track_id = static_cast<std::uint32_t>(a + 1);
        actor.cls = thing[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(thing.size()) - 1))];
        const ClassInfo& info = cfg.classes[actor.cls];
        actor.size = info.size;
        const double j = cfg.actor_hue_jitter;
        actor.color = {clamp_byte(info.color[0] + rng.uniform(-j, j)), clamp_byte(info.color[1] + rng.uniform(-j, j)),
                       clamp_byte(info.color[2] + rng.uniform(-j, j))};

        // Rejection-sample a start that keeps actors apart.
        double x0 = 0, y0 = 0;
        for (int attempt = 0; attempt < 200; ++attempt) {
            const double r = rng.uniform(cfg.actor_min_range, cfg.actor_max_range);
            const double th = rng.uniform(-std::numbers::pi, std::numbers::pi);
            x0 = r * std::cos(th);
            y0 = r * std::sin(th);
            const bool clear = std::all_of(starts.begin(), starts.end(), [&](const auto& s) {
                return std::hypot(s[0] - x0, s[1] - y0) > 6.0;
            });
            if (clear) break;
        }
        starts.push_back({x0, y0});

        // Constant velocity, heading roughly tangential so actors stay in range.
        const double heading = std::atan2(y0, x0) + (rng.uniform() < 0.5 ? 1 : -1) * std::numbers::pi / 2 +
                               rng.uniform(-0.3, 0.3);
        const double speed = rng.uniform(cfg.min_speed, cfg.max_speed);
        for (std::size_t f = 0; f < frames; ++f) {
            const double k = static_cast<double>(f);
            actor.poses.push_back({x0 + k * speed * std::cos(heading), y0 + k * speed * std::sin(heading), heading});
        }
        actor.visible.assign(frames, true);
        if (rng.uniform() < cfg.occlusion_probability) {
            // Keep at least one visible frame on each side of the window.
            const int max_len = std::min<int>(cfg.occlusion_max_frames, cfg.frames - 2);
            if (max_len >= cfg.occlusion_min_frames) {
                const auto len = static_cast<int>(rng.uniform_int(cfg.occlusion_min_frames, max_len));
                const auto start = static_cast<int>(rng.uniform_int(1, cfg.frames - 1 - len));
                for (int f = start; f < start + len; ++f) actor.visible[static_cast<std::size_t>(f)] = false;
            }
        }
        scene.actors.push_back(std::move(actor));
    }
}

void scan_frame(Scene& scene, std::size_t f, util::Rng& rng) {
    const auto& cfg = scene.config;
    const auto& lid = cfg.lidar;
    const FrameGeometry g = frame_geometry(scene, f);
    const Vec3 origin{0, 0, 0};
    const std::uint16_t ground_cls = class_with_role(cfg, ClassRole::kGround);

    struct Sample {
        Vec3 p;
        std::uint16_t cls;
        std::uint32_t track;
    };
    std::vector<Sample> stuff;
    std::vector<std::vector<Sample>> per_actor(scene.actors.size());
    const double deg = std::numbers::pi / 180.0;
    for (int b = 0; b < lid.beams; ++b) {
        const double frac = lid.beams == 1 ? 0.5 : static_cast<double>(b) / (lid.beams - 1);
        const double el = (lid.min_elevation_deg + frac * (lid.max_elevation_deg - lid.min_elevation_deg)) * deg;
        for (int a = 0; a < lid.azimuth_steps; ++a) {
            const double az = 2 * std::numbers::pi * (a + rng.uniform(-0.25, 0.25)) / lid.azimuth_steps;
            const Vec3 dir{std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
            const Hit hit = cast(g, origin, dir);
            if (hit.kind == HitKind::kNone || hit.t > lid.max_range) continue;
            const Vec3 p{hit.t * dir[0], hit.t * dir[1], hit.t * dir[2]};
            switch (hit.kind) {
                case HitKind::kGround: stuff.push_back({p, ground_cls, 0}); break;
                case HitKind::kStructure: stuff.push_back({p, g.structures[hit.index]->cls, 0}); break;
                case HitKind::kActor:
                    per_actor[hit.index].push_back({p, scene.actors[hit.index].cls, scene.actors[hit.index].track_id});
                    break;
                case HitKind::kNone: break;
            }
        }
    }

    std::vector<Sample> kept;
    for (auto& pts : per_actor) {
        rng.shuffle(pts);
        if (pts.size() > static_cast<std::size_t>(lid.max_points_per_actor))
            pts.resize(static_cast<std::size_t>(lid.max_points_per_actor));
        kept.insert(kept.end(), pts.begin(), pts.end());
    }
    const std::size_t stuff_budget =
        kept.size() < static_cast<std::size_t>(lid.points_per_frame) ? lid.points_per_frame - kept.size() : 0;
    rng.shuffle(stuff);
    if (stuff.size() > stuff_budget) stuff.resize(stuff_budget);
    kept.insert(kept.end(), stuff.begin(), stuff.end());
    // Azimuth order, like a spinning sensor.
    std::stable_sort(kept.begin(), kept.end(), [](const Sample& a, const Sample& b) {
        return std::atan2(a.p[1], a.p[0]) < std::atan2(b.p[1], b.p[0]);
    });

    Frame& frame = scene.frames[f];
    for (const auto& s : kept) {
        const double base = cfg.classes[s.cls].intensity;
        const double inten = std::clamp(base + rng.uniform(-cfg.intensity_noise, cfg.intensity_noise), 0.0, 1.0);
        frame.points.push_back({static_cast<float>(s.p[0]), static_cast<float>(s.p[1]), static_cast<float>(s.p[2]),
                                static_cast<float>(inten)});
        frame.cls.push_back(s.cls);
        frame.track.push_back(s.track);
    }
}

}  // namespace

RenderedView render_camera(const Scene& scene, std::size_t frame, const geom::CameraModel& cam) {
    const FrameGeometry g = frame_geometry(scene, frame);
    const auto& cfg = scene.config;
    const Rgb ground = cfg.classes[class_with_role(cfg, ClassRole::kGround)].color;
    const Rgb sky{150, 190, 230};
    const Vec3 origin = cam.to_sensor({0, 0, 0});

    RenderedView view;
    view.image.height = cam.height;
    view.image.width = cam.width;
    view.image.rgb.assign(static_cast<std::size_t>(cam.height) * cam.width * 3, 0);
    view.actor_index.assign(static_cast<std::size_t>(cam.height) * cam.width, -1);
    for (int v = 0; v < cam.height; ++v) {
        for (int u = 0; u < cam.width; ++u) {
            const Vec3 pc{(u + 0.5 - cam.cx) / cam.fx, (v + 0.5 - cam.cy) / cam.fy, 1.0};
            const Vec3 far = cam.to_sensor(pc);
            Vec3 dir{far[0] - origin[0], far[1] - origin[1], far[2] - origin[2]};
            const double n = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
            for (auto& d : dir) d /= n;
            const Hit hit = cast(g, origin, dir);
            Rgb c = sky;
            const Vec3 p{origin[0] + hit.t * dir[0], origin[1] + hit.t * dir[1], origin[2] + hit.t * dir[2]};
            switch (hit.kind) {
                case HitKind::kGround: {
                    const bool odd = (static_cast<long>(std::floor(p[0] / 2.0)) +
                                      static_cast<long>(std::floor(p[1] / 2.0))) & 1;
                    c = shade(ground, odd ? 0.8 : 1.15);
                    break;
                }
                case HitKind::kStructure: {
                    c = cfg.classes[g.structures[hit.index]->cls].color;
                    break;
                }
                case HitKind::kActor: {
                    const auto& actor = scene.actors[hit.index];
                    // Flat shading: the top face is brighter than the sides.
                    const Box box = scene.actor_box(actor, frame);
                    const bool top = std::abs(p[2] - (box.center[2] + box.size[2] / 2)) < 1e-6;
                    c = shade(actor.color, top ? 1.2 : 0.9);
                    view.actor_index[static_cast<std::size_t>(v) * cam.width + u] = static_cast<std::int32_t>(hit.index);
                    break;
                }
                case HitKind::kNone: break;
            }
            const std::size_t o = (static_cast<std::size_t>(v) * cam.width + u) * 3;
            view.image.rgb[o] = c[0];
            view.image.rgb[o + 1] = c[1];
            view.image.rgb[o + 2] = c[2];
        }
    }
    return view;
}

Scene generate_scene(const SceneConfig& config, std::uint64_t seed) {
    config.validate();
    Scene scene;
    scene.seed = seed;
    scene.config = config;
    for (const auto& spec : config.cameras)
        scene.cameras.push_back(geom::make_yaw_camera(spec.yaw, spec.hfov, spec.height, spec.width));

    util::Rng layout(util::mix_seed(seed, 1));
    place_structures(scene, layout);
    place_actors(scene, layout);

    scene.frames.resize(static_cast<std::size_t>(config.frames));
    for (std::size_t f = 0; f < scene.frames.size(); ++f) {
        util::Rng rng(util::mix_seed(seed, 100 + f));
        scan_frame(scene, f, rng);
        for (const auto& cam : scene.cameras) scene.frames[f].images.push_back(render_camera(scene, f, cam).image);
    }
    return scene;
}

PointCloudClip make_clip(const Scene& scene, std::size_t t) {
    if (t < 1 || t >= scene.frame_count())
        throw std::out_of_range("make_clip: frame " + std::to_string(t) + " needs a predecessor inside the scene");
    PointCloudClip clip;
    clip.frames = {t - 1, t};
    for (int slot = 0; slot < 2; ++slot) {
        const std::size_t f = clip.frames[static_cast<std::size_t>(slot)];
        const Frame& frame = scene.frames[f];
        for (std::size_t i = 0; i < frame.points.size(); ++i) {
            const auto& p = frame.points[i];
            clip.xyz.push_back({p.x, p.y, p.z});
            clip.intensity.push_back(p.intensity);
            clip.timestamp.push_back(slot == 0 ? -1.0 : 0.0);
            clip.cls.push_back(frame.cls[i]);
            clip.track.push_back(frame.track[i]);
            clip.source_index.push_back(static_cast<std::uint32_t>(i));
        }
        for (const auto& a : scene.actors) {
            if (!a.visible[f]) continue;
            clip.boxes[static_cast<std::size_t>(slot)].push_back(scene.actor_box(a, f));
            clip.box_track[static_cast<std::size_t>(slot)].push_back(a.track_id);
        }
    }
    clip.cameras = scene.cameras;
    clip.images = scene.frames[t].images;
    return clip;
}

PointCloudClip augment_clip(const PointCloudClip& clip, const AugmentParams& params, std::uint64_t seed) {
    if (params.point_budget <= 0) throw std::invalid_argument("augment_clip: point budget must be positive");
    if (params.rotation_max < params.rotation_min) throw std::invalid_argument("augment_clip: empty rotation range");
    if (params.jitter_sigma < 0 || params.brightness_sigma < 0)
        throw std::invalid_argument("augment_clip: negative sigma");
    util::Rng rng(seed);
    const double theta = params.rotation_min == params.rotation_max ? params.rotation_min
                                                                    : rng.uniform(params.rotation_min, params.rotation_max);
    const double c = std::cos(theta), s = std::sin(theta);
    const auto rotate = [&](const Vec3& p) { return Vec3{c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]}; };

    PointCloudClip out;
    out.frames = clip.frames;
    std::vector<std::size_t> keep(clip.size());
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = i;
    const auto budget = static_cast<std::uint64_t>(params.point_budget);
    if (budget < clip.size()) {
        rng.shuffle(keep);
        keep.resize(budget);
        std::sort(keep.begin(), keep.end());
    }
    for (std::size_t i : keep) {
        Vec3 p = rotate(clip.xyz[i]);
        if (params.jitter_sigma > 0)
            for (auto& v : p) v += params.jitter_sigma * rng.normal();
        out.xyz.push_back(p);
        out.intensity.push_back(clip.intensity[i]);
        out.timestamp.push_back(clip.timestamp[i]);
        out.cls.push_back(clip.cls[i]);
        out.track.push_back(clip.track[i]);
        out.source_index.push_back(clip.source_index[i]);
    }
    for (std::size_t k = 0; k < 2; ++k) {
        out.box_track[k] = clip.box_track[k];
        for (Box b : clip.boxes[k]) {
            b.center = rotate(b.center);
            b.yaw += theta;
            out.boxes[k].push_back(b);
        }
    }
    // The rig rotates with the points so projections stay consistent.
    const geom::Mat3 rz_inv{c, s, 0, -s, c, 0, 0, 0, 1};
    for (geom::CameraModel cam : clip.cameras) {
        geom::Mat3 r{};
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                for (int k = 0; k < 3; ++k) r[i * 3 + j] += cam.rotation[i * 3 + k] * rz_inv[k * 3 + j];
        cam.rotation = r;
        out.cameras.push_back(cam);
    }
    out.images = clip.images;
    if (params.brightness_sigma > 0) {
        for (auto& img : out.images) {
            const double gain = std::max(0.0, 1.0 + params.brightness_sigma * rng.normal());
            for (auto& b : img.rgb) b = clamp_byte(b * gain);
        }
    }
    return out;
}

}  // namespace p4d::synth
