#include <cctype>
#include <set>

#include "p4d/synthworld/scene.hpp"

namespace p4d::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kPointsMagic = "P4DPTS01";
constexpr std::string_view kLabelsMagic = "P4DLBL01";

const char* role_name(ClassRole r) {
    switch (r) {
        case ClassRole::kGround: return "ground";
        case ClassRole::kStructure: return "structure";
        case ClassRole::kActor: return "actor";
    }
    return "ground";
}

ClassRole role_from(const std::string& s) {
    if (s == "ground") return ClassRole::kGround;
    if (s == "structure") return ClassRole::kStructure;
    if (s == "actor") return ClassRole::kActor;
    throw ConfigError("classes.role", "unknown role '" + s + "'");
}

void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> known) {
    if (!j.is_object()) throw ConfigError(where, "expected an object");
    const std::set<std::string> k(known.begin(), known.end());
    for (const auto& [key, _] : j.items())
        if (!k.count(key)) throw ConfigError(where.empty() ? key : where + "." + key, "unknown key");
}

template <class T>
void read_opt(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where.empty() ? key : where + "." + key, e.what());
    }
}

}  // namespace

json scene_config_to_json(const SceneConfig& c) {
    json classes = json::array();
    for (const auto& k : c.classes)
        classes.push_back({{"name", k.name},
                           {"role", role_name(k.role)},
                           {"color", k.color},
                           {"intensity", k.intensity},
                           {"size", k.size}});
    json cams = json::array();
    for (const auto& k : c.cameras)
        cams.push_back({{"yaw", k.yaw}, {"hfov", k.hfov}, {"height", k.height}, {"width", k.width}});
    const auto& l = c.lidar;
    return {{"frames", c.frames},
            {"min_actors", c.min_actors},
            {"max_actors", c.max_actors},
            {"classes", classes},
            {"lidar",
             {{"beams", l.beams},
              {"azimuth_steps", l.azimuth_steps},
              {"min_elevation_deg", l.min_elevation_deg},
              {"max_elevation_deg", l.max_elevation_deg},
              {"max_range", l.max_range},
              {"sensor_height", l.sensor_height},
              {"points_per_frame", l.points_per_frame},
              {"max_points_per_actor", l.max_points_per_actor}}},
            {"cameras", cams},
            {"structures", c.structures},
            {"actor_min_range", c.actor_min_range},
            {"actor_max_range", c.actor_max_range},
            {"min_speed", c.min_speed},
            {"max_speed", c.max_speed},
            {"occlusion_probability", c.occlusion_probability},
            {"occlusion_min_frames", c.occlusion_min_frames},
            {"occlusion_max_frames", c.occlusion_max_frames},
            {"intensity_noise", c.intensity_noise},
            {"actor_hue_jitter", c.actor_hue_jitter}};
}

SceneConfig scene_config_from_json(const json& j) {
    reject_unknown(j, "",
                   {"frames", "min_actors", "max_actors", "classes", "lidar", "cameras", "structures",
                    "actor_min_range", "actor_max_range", "min_speed", "max_speed", "occlusion_probability",
                    "occlusion_min_frames", "occlusion_max_frames", "intensity_noise", "actor_hue_jitter"});
    SceneConfig c;
    read_opt(j, "frames", c.frames, "");
    read_opt(j, "min_actors", c.min_actors, "");
    read_opt(j, "max_actors", c.max_actors, "");
    read_opt(j, "structures", c.structures, "");
    read_opt(j, "actor_min_range", c.actor_min_range, "");
    read_opt(j, "actor_max_range", c.actor_max_range, "");
    read_opt(j, "min_speed", c.min_speed, "");
    read_opt(j, "max_speed", c.max_speed, "");
    read_opt(j, "occlusion_probability", c.occlusion_probability, "");
    read_opt(j, "occlusion_min_frames", c.occlusion_min_frames, "");
    read_opt(j, "occlusion_max_frames", c.occlusion_max_frames, "");
    read_opt(j, "intensity_noise", c.intensity_noise, "");
    read_opt(j, "actor_hue_jitter", c.actor_hue_jitter, "");
    if (j.contains("classes")) {
        if (!j["classes"].is_array()) throw ConfigError("classes", "expected an array");
        c.classes.clear();
        for (const auto& e : j["classes"]) {
            reject_unknown(e, "classes", {"name", "role", "color", "intensity", "size"});
            ClassInfo k;
            std::string role = "ground";
            read_opt(e, "name", k.name, "classes");
            read_opt(e, "role", role, "classes");
            read_opt(e, "color", k.color, "classes");
            read_opt(e, "intensity", k.intensity, "classes");
            read_opt(e, "size", k.size, "classes");
            k.role = role_from(role);
            c.classes.push_back(k);
        }
    }
    if (j.contains("lidar")) {
        const auto& e = j["lidar"];
        reject_unknown(e, "lidar",
                       {"beams", "azimuth_steps", "min_elevation_deg", "max_elevation_deg", "max_range",
                        "sensor_height", "points_per_frame", "max_points_per_actor"});
        auto& l = c.lidar;
        read_opt(e, "beams", l.beams, "lidar");
        read_opt(e, "azimuth_steps", l.azimuth_steps, "lidar");
        read_opt(e, "min_elevation_deg", l.min_elevation_deg, "lidar");
        read_opt(e, "max_elevation_deg", l.max_elevation_deg, "lidar");
        read_opt(e, "max_range", l.max_range, "lidar");
        read_opt(e, "sensor_height", l.sensor_height, "lidar");
        read_opt(e, "points_per_frame", l.points_per_frame, "lidar");
        read_opt(e, "max_points_per_actor", l.max_points_per_actor, "lidar");
    }
    if (j.contains("cameras")) {
        if (!j["cameras"].is_array()) throw ConfigError("cameras", "expected an array");
        c.cameras.clear();
        for (const auto& e : j["cameras"]) {
            reject_unknown(e, "cameras", {"yaw", "hfov", "height", "width"});
            CameraSpec k;
            read_opt(e, "yaw", k.yaw, "cameras");
            read_opt(e, "hfov", k.hfov, "cameras");
            read_opt(e, "height", k.height, "cameras");
            read_opt(e, "width", k.width, "cameras");
            c.cameras.push_back(k);
        }
    }
    return c;
}

void write_ppm(const Image& img, const fs::path& path) {
    if (img.rgb.size() != static_cast<std::size_t>(img.height) * img.width * 3)
        throw std::invalid_argument("write_ppm: pixel buffer does not match image size");
    util::ByteWriter w;
    w.put_bytes("P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n");
    w.put_bytes(std::string_view(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size()));
    util::write_file(path, w.bytes());
}

Image read_ppm(const fs::path& path) {
    const auto bytes = util::read_file(path);
    const std::string name = path.filename().string();
    std::size_t pos = 0;
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw DatasetError(name, 0, "bad magic, expected 'P6'");
    pos = 2;
    const auto next_int = [&]() {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        const std::size_t start = pos;
        long v = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])) && pos - start < 9)
            v = v * 10 + (bytes[pos++] - '0');
        if (pos == start) throw DatasetError(name, start, "malformed header");
        return v;
    };
    Image img;
    img.width = static_cast<int>(next_int());
    img.height = static_cast<int>(next_int());
    if (next_int() != 255) throw DatasetError(name, pos, "only 8-bit pixmaps are supported");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw DatasetError(name, pos, "malformed header");
    ++pos;
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height * 3;
    if (bytes.size() - pos < n) throw DatasetError(name, bytes.size(), "truncated pixel data");
    if (bytes.size() - pos > n) throw DatasetError(name, pos + n, "trailing bytes");
    img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
    return img;
}

void write_dataset(const Scene& scene, const fs::path& dir) {
    fs::create_directories(dir);
    json cameras = json::array();
    for (const auto& c : scene.cameras)
        cameras.push_back({{"intrinsics", c.intrinsic_matrix()},
                           {"extrinsics", c.extrinsic_matrix()},
                           {"height", c.height},
                           {"width", c.width}});
    json palette = json::array();
    for (std::size_t i = 0; i < scene.config.classes.size(); ++i)
        palette.push_back({{"id", i}, {"name", scene.config.classes[i].name}, {"thing", scene.config.classes[i].thing()}});
    json structures = json::array();
    for (const auto& s : scene.structures)
        structures.push_back({{"class", s.cls}, {"center", s.box.center}, {"size", s.box.size}, {"yaw", s.box.yaw}});
    json actors = json::array();
    for (const auto& a : scene.actors) {
        json poses = json::array();
        for (const auto& p : a.poses) poses.push_back({p.x, p.y, p.yaw});
        json visible = json::array();
        for (bool v : a.visible) visible.push_back(v);
        actors.push_back({{"track_id", a.track_id},
                          {"class", a.cls},
                          {"size", a.size},
                          {"color", a.color},
                          {"poses", poses},
                          {"visible", visible}});
    }
    json frames = json::array();
    for (std::size_t t = 0; t < scene.frames.size(); ++t) {
        const Frame& f = scene.frames[t];
        const std::string ts = std::to_string(t);
        util::ByteWriter pts;
        pts.put_bytes(kPointsMagic);
        pts.put(static_cast<std::uint32_t>(f.points.size()));
        for (const auto& p : f.points) {
            pts.put(p.x);
            pts.put(p.y);
            pts.put(p.z);
            pts.put(p.intensity);
        }
        util::write_file(dir / ("points_" + ts + ".bin"), pts.bytes());
        util::ByteWriter lbl;
        lbl.put_bytes(kLabelsMagic);
        lbl.put(static_cast<std::uint32_t>(f.cls.size()));
        for (std::size_t i = 0; i < f.cls.size(); ++i) {
            lbl.put(f.cls[i]);
            lbl.put(f.track[i]);
        }
        util::write_file(dir / ("labels_" + ts + ".bin"), lbl.bytes());
        json images = json::array();
        for (std::size_t k = 0; k < f.images.size(); ++k) {
            const std::string name = "cam" + std::to_string(k) + "_" + ts + ".ppm";
            write_ppm(f.images[k], dir / name);
            images.push_back(name);
        }
        frames.push_back({{"points", "points_" + ts + ".bin"},
                          {"labels", "labels_" + ts + ".bin"},
                          {"images", images},
                          {"num_points", f.points.size()}});
    }
    const json manifest{{"format", "p4d-scene"},
                        {"version", 1},
                        {"seed", scene.seed},
                        {"config", scene_config_to_json(scene.config)},
                        {"palette", palette},
                        {"cameras", cameras},
                        {"structures", structures},
                        {"actors", actors},
                        {"frames", frames}};
    util::write_file(dir / "manifest.json", manifest.dump(1));
}

Scene read_dataset(const fs::path& dir) {
    const auto raw = util::read_file(dir / "manifest.json");
    json m;
    try {
        m = json::parse(raw.begin(), raw.end());
    } catch (const json::parse_error& e) {
        throw DatasetError("manifest.json", e.byte, "malformed JSON");
    }
    Scene scene;
    try {
        if (m.at("format") != "p4d-scene") throw DatasetError("manifest.json", 0, "not a p4d scene manifest");
        if (m.at("version") != 1) throw DatasetError("manifest.json", 0, "unsupported version");
        scene.seed = m.at("seed").get<std::uint64_t>();
        scene.config = scene_config_from_json(m.at("config"));
        for (const auto& c : m.at("cameras")) {
            const auto k = c.at("intrinsics").get<std::vector<double>>();
            const auto rt = c.at("extrinsics").get<std::vector<double>>();
            scene.cameras.push_back(geom::CameraModel::from_matrices(k, rt, c.at("height"), c.at("width")));
        }
        for (const auto& s : m.at("structures")) {
            Structure st;
            st.cls = s.at("class");
            st.box.center = s.at("center");
            st.box.size = s.at("size");
            st.box.yaw = s.at("yaw");
            scene.structures.push_back(st);
        }
        for (const auto& a : m.at("actors")) {
            ActorTrack at;
            at.track_id = a.at("track_id");
            at.cls = a.at("class");
            at.size = a.at("size");
            at.color = a.at("color");
            for (const auto& p : a.at("poses")) at.poses.push_back({p.at(0), p.at(1), p.at(2)});
            at.visible = a.at("visible").get<std::vector<bool>>();
            scene.actors.push_back(std::move(at));
        }
    } catch (const json::exception& e) {
        throw DatasetError("manifest.json", 0, std::string("malformed manifest: ") + e.what());
    } catch (const ConfigError& e) {
        throw DatasetError("manifest.json", 0, std::string("invalid config: ") + e.what());
    } catch (const geom::CalibrationError& e) {
        throw DatasetError("manifest.json", 0, std::string("invalid calibration: ") + e.what());
    }

    const auto& frames = m.at("frames");
    for (const auto& fj : frames) {
        Frame f;
        std::string pts_name, lbl_name;
        std::vector<std::string> img_names;
        std::size_t n = 0;
        try {
            pts_name = fj.at("points");
            lbl_name = fj.at("labels");
            img_names = fj.at("images").get<std::vector<std::string>>();
            n = fj.at("num_points");
        } catch (const json::exception& e) {
            throw DatasetError("manifest.json", 0, std::string("malformed frame entry: ") + e.what());
        }
        for (const auto& name : {pts_name, lbl_name})
            if (!fs::exists(dir / name)) throw DatasetError(name, 0, "missing frame file");

        util::ByteReader pr(pts_name, util::read_file(dir / pts_name));
        pr.expect_magic(kPointsMagic);
        if (pr.get<std::uint32_t>() != n) throw DatasetError(pts_name, kPointsMagic.size(), "point count mismatch");
        for (std::size_t i = 0; i < n; ++i) {
            LidarPoint p;
            p.x = pr.get<float>();
            p.y = pr.get<float>();
            p.z = pr.get<float>();
            p.intensity = pr.get<float>();
            f.points.push_back(p);
        }
        pr.expect_end();

        util::ByteReader lr(lbl_name, util::read_file(dir / lbl_name));
        lr.expect_magic(kLabelsMagic);
        if (lr.get<std::uint32_t>() != n) throw DatasetError(lbl_name, kLabelsMagic.size(), "label count mismatch");
        for (std::size_t i = 0; i < n; ++i) {
            f.cls.push_back(lr.get<std::uint16_t>());
            f.track.push_back(lr.get<std::uint32_t>());
        }
        lr.expect_end();

        for (const auto& name : img_names) {
            if (!fs::exists(dir / name)) throw DatasetError(name, 0, "missing frame file");
            f.images.push_back(read_ppm(dir / name));
        }
        scene.frames.push_back(std::move(f));
    }
    if (scene.frames.size() != static_cast<std::size_t>(scene.config.frames))
        throw DatasetError("manifest.json", 0, "frame index does not match the configured frame count");
    for (const auto& a : scene.actors)
        if (a.poses.size() != scene.frames.size() || a.visible.size() != scene.frames.size())
            throw DatasetError("manifest.json", 0, "actor trajectory length does not match frame count");
    return scene;
}

}  // namespace p4d::synth
