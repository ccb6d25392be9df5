#pragma once

// Local HTTP service over annotation sessions.

// Eigen first: httplib pulls in <resolv.h>, whose _res macro breaks Eigen.
#include "covseg/pipeline.hpp"

#include <httplib.h>
#include <json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>

namespace covseg {

/// 8-bit slice plus a run-length encoded label overlay.
struct SliceImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;               // row-major
  std::vector<std::pair<int, int>> overlay_runs;  // (label, run length)
};

inline const std::vector<std::string>& overlay_labels() {
  static const std::vector<std::string> labels{"", "lungs-left", "lungs-right", "lesions"};
  return labels;
}

/// Axis 2 gives an (x, y) slice, axis 1 (x, z), axis 0 (y, z). Overlay
/// labels follow overlay_labels(); later targets win.
inline SliceImage render_slice(const Session& s, int axis, int index, double window, double level,
                               const std::vector<std::string>& overlay) {
  const Volume& v = s.image();
  const auto& d = v.dims();
  if (axis < 0 || axis > 2) throw InvalidArgumentError("axis must be 0, 1 or 2");
  if (index < 0 || index >= d[axis]) throw OutOfDomainError("slice index outside the volume");
  if (!(window > 0)) throw InvalidArgumentError("window must be positive");
  const int u = axis == 0 ? 1 : 0;
  const int w = axis == 2 ? 1 : 2;
  SliceImage out;
  out.width = d[u];
  out.height = d[w];
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height);
  std::vector<const DistanceMap*> maps(overlay_labels().size(), nullptr);
  for (const auto& name : overlay) {
    const auto it = std::find(overlay_labels().begin(), overlay_labels().end(), name);
    if (name.empty() || it == overlay_labels().end()) throw InvalidArgumentError("unknown overlay '" + name + "'");
    const auto& m = s.target(name);
    if (m) maps[static_cast<std::size_t>(it - overlay_labels().begin())] = &*m;
  }
  const double lo = level - window / 2;
  int run_label = -1, run = 0;
  for (int b = 0; b < out.height; ++b)
    for (int a = 0; a < out.width; ++a) {
      Index3 ijk;
      ijk[axis] = index;
      ijk[u] = a;
      ijk[w] = b;
      const double g = std::clamp((v.at(ijk[0], ijk[1], ijk[2]) - lo) / window, 0.0, 1.0);
      out.pixels[static_cast<std::size_t>(b) * out.width + a] = static_cast<std::uint8_t>(std::lround(255 * g));
      int label = 0;
      for (std::size_t l = 1; l < maps.size(); ++l)
        if (maps[l] && maps[l]->at(ijk[0], ijk[1], ijk[2]) > 0) label = static_cast<int>(l);
      if (label == run_label) {
        ++run;
      } else {
        if (run > 0) out.overlay_runs.emplace_back(run_label, run);
        run_label = label;
        run = 1;
      }
    }
  if (run > 0) out.overlay_runs.emplace_back(run_label, run);
  return out;
}

/// Index-space box of voxels whose inside/outside label differs between two maps.
/// A missing map counts as all outside.
inline std::optional<IndexBox> changed_region(const std::optional<DistanceMap>& a, const std::optional<DistanceMap>& b) {
  if (!a && !b) return std::nullopt;
  const DistanceMap& ref = a ? *a : *b;
  IndexBox box;
  const Geometry& g = ref.geometry();
  std::size_t n = 0;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i, ++n)
        if ((a && (*a)[n] > 0) != (b && (*b)[n] > 0)) box.expand(i, j, k);
  if (box.empty()) return std::nullopt;
  return box;
}

class Service {
 public:
  Service(std::filesystem::path data_dir, PipelineConfig defaults)
      : data_dir_(std::move(data_dir)), defaults_(std::move(defaults)) {
    std::filesystem::create_directories(data_dir_);
  }

  void mount(httplib::Server& server) {
    server.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] { return create(req); });
    });
    server.Post(R"(/sessions/([0-9a-zA-Z_-]+)/lungs)", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] { return run_stage(req.matches[1], req.body, true); });
    });
    server.Post(R"(/sessions/([0-9a-zA-Z_-]+)/lesions)", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] { return run_stage(req.matches[1], req.body, false); });
    });
    server.Post(R"(/sessions/([0-9a-zA-Z_-]+)/edits)", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] { return edit(req.matches[1], req.body); });
    });
    server.Post(R"(/sessions/([0-9a-zA-Z_-]+)/undo)", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] { return undo(req.matches[1]); });
    });
    server.Get(R"(/sessions/([0-9a-zA-Z_-]+)/state)", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] {
        auto slot = find(req.matches[1]);
        std::shared_lock lock(slot->mutex);
        return state_json(*slot->session);
      });
    });
    server.Get(R"(/sessions/([0-9a-zA-Z_-]+)/slice)", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] { return slice(req); });
    });
    server.Get(R"(/sessions/([0-9a-zA-Z_-]+)/mesh/([a-z-]+))", [this](const httplib::Request& req, httplib::Response& res) {
      handle_raw(res, [&] {
        auto slot = find(req.matches[1]);
        std::shared_lock lock(slot->mutex);
        const auto& d = slot->session->target(req.matches[2]);
        if (!d) throw InvalidArgumentError("target has not been segmented");
        res.set_content(to_obj(extract_mesh(*d)), "text/plain");
      });
    });
    server.Get(R"(/sessions/([0-9a-zA-Z_-]+)/export)", [this](const httplib::Request& req, httplib::Response& res) {
      handle_raw(res, [&] {
        auto slot = find(req.matches[1]);
        const std::string target = req.has_param("target") ? req.get_param_value("target") : "lesions";
        std::shared_lock lock(slot->mutex);
        const Bytes bytes = encode_nifti(export_mask(*slot->session, target), true);
        res.set_content(std::string(bytes.begin(), bytes.end()), "application/gzip");
      });
    });
  }

 private:
  struct Slot {
    std::shared_mutex mutex;
    std::unique_ptr<Session> session;
  };

  static int status_for(const std::exception& e) {
    if (dynamic_cast<const StageError*>(&e)) return 409;
    if (dynamic_cast<const NotFound*>(&e)) return 404;
    if (dynamic_cast<const ScriptError*>(&e) || dynamic_cast<const InvalidArgumentError*>(&e) ||
        dynamic_cast<const ParseError*>(&e) || dynamic_cast<const UnsupportedFormatError*>(&e) ||
        dynamic_cast<const OutOfDomainError*>(&e) || dynamic_cast<const SingularSystemError*>(&e) ||
        dynamic_cast<const EmptySurfaceError*>(&e) || dynamic_cast<const GeometryError*>(&e) ||
        dynamic_cast<const OrientationError*>(&e))
      return 400;
    return 500;
  }

  static json error_json(const std::exception& e) {
    json j{{"error", e.what()}};
    if (const auto* s = dynamic_cast<const StageError*>(&e)) j["stage"] = s->stage();
    if (const auto* s = dynamic_cast<const ScriptError*>(&e)) j["event_index"] = s->event_index();
    return j;
  }

  template <class Fn>
  static void handle(httplib::Response& res, Fn&& fn) {
    handle_raw(res, [&] { res.set_content(fn().dump(), "application/json"); });
  }

  template <class Fn>
  static void handle_raw(httplib::Response& res, Fn&& fn) {
    try {
      fn();
      res.status = 200;
    } catch (const std::exception& e) {
      res.status = status_for(e);
      res.set_content(error_json(e).dump(), "application/json");
    }
  }

  class NotFound : public Error {
   public:
    using Error::Error;
  };

  std::shared_ptr<Slot> find(const std::string& id) {
    std::lock_guard lock(registry_mutex_);
    auto it = sessions_.find(id);
    if (it != sessions_.end()) return it->second;
    const auto dir = data_dir_ / id;
    if (!std::filesystem::exists(dir / "session.json")) throw NotFound("no session '" + id + "'");
    auto slot = std::make_shared<Slot>();
    slot->session = std::make_unique<Session>(load_session(dir));
    sessions_[id] = slot;
    return slot;
  }

  static json state_json(const Session& s) {
    json hist = json::array();
    for (const auto& op : s.history()) {
      switch (op.kind) {
        case HistoryOp::Kind::lungs: hist.push_back({{"op", "lungs"}}); break;
        case HistoryOp::Kind::lesions: hist.push_back({{"op", "lesions"}}); break;
        case HistoryOp::Kind::edits: hist.push_back({{"op", "edits"}, {"events", op.script.events.size()}}); break;
      }
    }
    const auto& g = s.image().geometry();
    return {{"id", s.id()},
            {"stage", to_string(s.stage())},
            {"config", config_json(s.config())},
            {"history_length", s.history().size()},
            {"history", hist},
            {"dims", {g.dims[0], g.dims[1], g.dims[2]}},
            {"spacing", {g.spacing[0], g.spacing[1], g.spacing[2]}},
            {"origin", {g.origin[0], g.origin[1], g.origin[2]}},
            {"targets",
             {{"lungs-left", s.maps().left.has_value()},
              {"lungs-right", s.maps().right.has_value()},
              {"lesions", s.maps().lesions.has_value()}}}};
  }

  static json parse_body(const std::string& body) {
    if (body.empty()) return json::object();
    try {
      return json::parse(body);
    } catch (const json::exception& e) {
      throw InvalidArgumentError(std::string("malformed request body: ") + e.what());
    }
  }

  json create(const httplib::Request& req) {
    if (req.body.empty()) throw InvalidArgumentError("upload a NIfTI volume as the request body");
    const auto raw = nifti::decode(std::span(reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size()));
    PipelineConfig config = defaults_;
    if (req.has_param("config")) config = apply_config(config, parse_body(req.get_param_value("config")));
    auto slot = std::make_shared<Slot>();
    slot->session = std::make_unique<Session>(new_session_id(), to_volume(raw), config);
    const std::string id = slot->session->id();
    save_session(data_dir_ / id, *slot->session);
    {
      std::lock_guard lock(registry_mutex_);
      sessions_[id] = slot;
    }
    return state_json(*slot->session);
  }

  json run_stage(const std::string& id, const std::string& body, bool lungs) {
    const json j = parse_body(body);
    auto slot = find(id);
    std::unique_lock lock(slot->mutex);
    Session& s = *slot->session;
    if (j.contains("config")) s.set_config(apply_config(s.config(), j["config"]));
    const bool force = j.value("force", false);
    if (lungs) s.run_lungs(force);
    else s.run_lesions(force);
    save_session(data_dir_ / id, s);
    return state_json(s);
  }

  json edit(const std::string& id, const std::string& body) {
    const json j = parse_body(body);
    EditScript script;
    try {
      script.events.push_back(parse_script_entry(j));
    } catch (const std::exception& e) {
      throw ScriptError(0, e.what());
    }
    auto slot = find(id);
    std::unique_lock lock(slot->mutex);
    Session& s = *slot->session;
    const SessionMaps before = s.maps();
    s.apply_edits(script);
    save_session(data_dir_ / id, s);
    json out = state_json(s);
    const auto& t = script.events.front().target;
    const auto& after = s.target(t);
    const auto& prev = t == "lungs-left" ? before.left : t == "lungs-right" ? before.right : before.lesions;
    const auto box = changed_region(prev, after);
    out["changed"] = box ? json{{"lo", {box->lo[0], box->lo[1], box->lo[2]}}, {"hi", {box->hi[0], box->hi[1], box->hi[2]}}}
                         : json(nullptr);
    return out;
  }

  json undo(const std::string& id) {
    auto slot = find(id);
    std::unique_lock lock(slot->mutex);
    slot->session->undo();
    save_session(data_dir_ / id, *slot->session);
    return state_json(*slot->session);
  }

  json slice(const httplib::Request& req) {
    auto slot = find(req.matches[1]);
    auto num = [&](const char* key, double fallback) {
      if (!req.has_param(key)) return fallback;
      try {
        return std::stod(req.get_param_value(key));
      } catch (const std::exception&) {
        throw InvalidArgumentError(std::string("bad numeric parameter '") + key + "'");
      }
    };
    const int axis = static_cast<int>(num("axis", 2));
    const int index = static_cast<int>(num("index", 0));
    const double window = num("window", 1500), level = num("level", -600);
    std::vector<std::string> overlay;
    if (req.has_param("overlay")) {
      std::stringstream ss(req.get_param_value("overlay"));
      std::string item;
      while (std::getline(ss, item, ','))
        if (!item.empty()) overlay.push_back(item);
    } else {
      overlay = {"lungs-left", "lungs-right", "lesions"};
    }
    std::shared_lock lock(slot->mutex);
    const SliceImage img = render_slice(*slot->session, axis, index, window, level, overlay);
    json runs = json::array();
    for (const auto& [label, count] : img.overlay_runs) runs.push_back({label, count});
    return {{"axis", axis},
            {"index", index},
            {"width", img.width},
            {"height", img.height},
            {"pixels", httplib::detail::base64_encode(std::string(img.pixels.begin(), img.pixels.end()))},
            {"overlay", {{"labels", overlay_labels()}, {"runs", runs}}}};
  }

  std::filesystem::path data_dir_;
  PipelineConfig defaults_;
  std::mutex registry_mutex_;
  std::map<std::string, std::shared_ptr<Slot>> sessions_;
};

}  // namespace covseg
