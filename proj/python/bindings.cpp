#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "p4d/cli/run.hpp"
#include "p4d/supervision/supervision.hpp"

namespace py = pybind11;
using namespace p4d;

namespace {

template <class T>
py::array_t<T> to_array(const std::vector<T>& v) {
    py::array_t<T> a(static_cast<py::ssize_t>(v.size()));
    std::copy(v.begin(), v.end(), a.mutable_data());
    return a;
}

template <class T>
std::vector<std::vector<T>> frames_from(const std::vector<py::array_t<T, py::array::c_style | py::array::forcecast>>& in) {
    std::vector<std::vector<T>> out;
    for (const auto& a : in) out.emplace_back(a.data(), a.data() + a.size());
    return out;
}

using ClsFrames = std::vector<py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>>;
using TrackFrames = std::vector<py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>>;

metrics::PanopticLabeling labeling(const ClsFrames& cls, const TrackFrames& track) {
    metrics::PanopticLabeling l;
    l.cls = frames_from(cls);
    l.track = frames_from(track);
    return l;
}

metrics::MetricConfig metric_config(const std::vector<bool>& thing, std::optional<std::uint16_t> ignore) {
    metrics::MetricConfig c;
    c.thing = thing;
    c.ignore_class = ignore;
    return c;
}

// Maps config errors to ValueError and file errors to RuntimeError.
template <class F>
auto guarded(F&& f) {
    try {
        return f();
    } catch (const cli::ConfigError& e) {
        throw py::value_error(std::string("config error: ") + e.what());
    } catch (const util::IoError& e) {
        throw std::runtime_error(std::string("i/o error: ") + e.what());
    }
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Bindings for the p4d C++ core";
    m.attr("__version__") = cli::kCodeVersion;

    py::register_exception<metrics::MisalignedInput>(m, "MisalignedInput", PyExc_ValueError);
    py::register_exception<sup::DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);

    py::class_<synth::Scene>(m, "Scene")
        .def_property_readonly("seed", [](const synth::Scene& s) { return s.seed; })
        .def_property_readonly("frame_count", &synth::Scene::frame_count)
        .def("points",
             [](const synth::Scene& s, std::size_t f) {
                 const auto& pts = s.frames.at(f).points;
                 py::array_t<double> a({static_cast<py::ssize_t>(pts.size()), py::ssize_t{4}});
                 auto r = a.mutable_unchecked<2>();
                 for (std::size_t i = 0; i < pts.size(); ++i) {
                     r(i, 0) = pts[i].x;
                     r(i, 1) = pts[i].y;
                     r(i, 2) = pts[i].z;
                     r(i, 3) = pts[i].intensity;
                 }
                 return a;
             },
             py::arg("frame"), "x, y, z, intensity per point")
        .def("classes", [](const synth::Scene& s, std::size_t f) { return to_array(s.frames.at(f).cls); }, py::arg("frame"))
        .def("tracks", [](const synth::Scene& s, std::size_t f) { return to_array(s.frames.at(f).track); }, py::arg("frame"))
        .def("class_names", [](const synth::Scene& s) {
            std::vector<std::string> n;
            for (const auto& c : s.config.classes) n.push_back(c.name);
            return n;
        })
        .def("thing_mask", [](const synth::Scene& s) {
            std::vector<bool> t;
            for (const auto& c : s.config.classes) t.push_back(c.thing());
            return t;
        });

    m.def("_generate_scene",
          [](const std::string& scene_json, std::uint64_t seed) {
              return guarded([&] {
                  const auto cfg = synth::scene_config_from_json(nlohmann::json::parse(scene_json));
                  return synth::generate_scene(cfg, seed);
              });
          },
          py::arg("scene_json"), py::arg("seed"));
    m.def("read_scene", [](const std::filesystem::path& dir) { return guarded([&] { return synth::read_dataset(dir); }); },
          py::arg("dir"));

    m.def("_load_config",
          [](const std::string& path, const std::vector<std::string>& overrides) {
              return guarded([&] { return cli::load_config(path, overrides).to_json().dump(); });
          },
          py::arg("path"), py::arg("overrides"));

    m.def("_evaluate",
          [](const ClsFrames& pc, const TrackFrames& pt, const ClsFrames& gc, const TrackFrames& gt,
             const std::vector<bool>& thing, std::optional<std::uint16_t> ignore, bool oracle) {
              const auto cfg = metric_config(thing, ignore);
              const auto pred = labeling(pc, pt), truth = labeling(gc, gt);
              const auto r = oracle ? metrics::oracle_evaluate(pred, truth, cfg) : metrics::evaluate(pred, truth, cfg);
              return r.to_json({}).dump();
          },
          py::arg("pred_cls"), py::arg("pred_track"), py::arg("gt_cls"), py::arg("gt_track"), py::arg("thing"),
          py::arg("ignore_class") = py::none(), py::arg("oracle") = false);

    m.def("hungarian",
          [](py::array_t<double, py::array::c_style | py::array::forcecast> cost) {
              if (cost.ndim() != 2) throw py::value_error("cost must be a 2-D array");
              const auto rows = static_cast<std::size_t>(cost.shape(0)), cols = static_cast<std::size_t>(cost.shape(1));
              const ad::Tensor c({rows, cols}, std::vector<double>(cost.data(), cost.data() + cost.size()));
              const auto res = sup::hungarian_match(c);
              return py::make_tuple(res.pairs, res.cost);
          },
          py::arg("cost"), "Minimum-cost assignment; returns ([(row, col), ...], total cost)");

    m.def("read_predictions",
          [](const std::filesystem::path& dir) {
              const auto l = guarded([&] { return track::read_predictions(dir); });
              py::list cls, trk;
              for (std::size_t f = 0; f < l.cls.size(); ++f) {
                  cls.append(to_array(l.cls[f]));
                  trk.append(to_array(l.track[f]));
              }
              return py::make_tuple(cls, trk);
          },
          py::arg("dir"));

    m.def("_generate", [](const std::string& cfg, const std::filesystem::path& out) {
        guarded([&] { cli::cmd_generate(cli::RunConfig::from_json(nlohmann::json::parse(cfg)), out); });
    });
    m.def("_train", [](const std::string& cfg, const std::filesystem::path& data, const std::filesystem::path& out) {
        py::gil_scoped_release release;
        guarded([&] { cli::cmd_train(cli::RunConfig::from_json(nlohmann::json::parse(cfg)), data, out); });
    });
    m.def("_train_tam", [](const std::string& cfg, const std::filesystem::path& data, const std::filesystem::path& stage1,
                           const std::filesystem::path& out) {
        py::gil_scoped_release release;
        guarded([&] { cli::cmd_train_tam(cli::RunConfig::from_json(nlohmann::json::parse(cfg)), data, stage1, out); });
    });
    m.def("_infer", [](const std::string& cfg, const std::filesystem::path& stage1, const std::filesystem::path& tam,
                       const std::filesystem::path& scenes, const std::filesystem::path& out, bool baseline_iou) {
        py::gil_scoped_release release;
        guarded([&] {
            cli::cmd_infer(cli::RunConfig::from_json(nlohmann::json::parse(cfg)), stage1, tam, scenes, out, baseline_iou);
        });
    });
    m.def("_eval", [](const std::filesystem::path& pred, const std::filesystem::path& gt, const std::filesystem::path& out,
                      bool oracle) {
        return guarded([&] { return cli::cmd_eval(pred, gt, out, oracle).report.to_json({}).dump(); });
    });
}
