#pragma once

// Pipeline configuration, annotation sessions and their persistence.

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "covseg/editing.hpp"
#include "covseg/metrics.hpp"
#include "covseg/shape_model.hpp"

namespace covseg {

using nlohmann::json;

struct PipelineConfig {
  LevelSetParams lung = LevelSetParams::lung();
  LevelSetParams lesion = LevelSetParams::lesion();
  double model_curvature_weight = 0.3;
  double model_weight = 0.1;
  std::string left_model;
  std::string right_model;
  double coarse_spacing_mm = 3.0;
  double iso_spacing_mm = 1.0;
  double distance_cap_mm = kDefaultDistanceCap;
  int threads = 1;

  LevelSetParams model_params() const {
    LevelSetParams p = lung;
    p.curvature_weight = model_curvature_weight;
    p.model_weight = model_weight;
    return p;
  }

  void validate() const {
    lung.validate();
    lesion.validate();
    model_params().validate();
    if (!(coarse_spacing_mm > 0) || !(iso_spacing_mm > 0)) throw InvalidArgumentError("resample spacings must be positive");
    if (!(distance_cap_mm > 0)) throw InvalidArgumentError("distance cap must be positive");
    if (threads < 1) throw InvalidArgumentError("threads must be at least 1");
  }
};

namespace detail {

inline json params_json(const LevelSetParams& p) {
  return {{"t_low", p.t_low},
          {"t_high", p.t_high},
          {"curvature_weight", p.curvature_weight},
          {"max_iterations", p.max_iterations},
          {"convergence_tol", p.convergence_tol}};
}

inline void read_params(const json& j, LevelSetParams& p) {
  if (!j.is_object()) throw InvalidArgumentError("level-set parameters must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "t_low") p.t_low = it->get<double>();
    else if (k == "t_high") p.t_high = it->get<double>();
    else if (k == "curvature_weight") p.curvature_weight = it->get<double>();
    else if (k == "max_iterations") p.max_iterations = it->get<int>();
    else if (k == "convergence_tol") p.convergence_tol = it->get<double>();
    else throw InvalidArgumentError("unknown level-set parameter '" + k + "'");
  }
}

}  // namespace detail

inline json config_json(const PipelineConfig& c) {
  json j;
  j["lung"] = detail::params_json(c.lung);
  j["lesion"] = detail::params_json(c.lesion);
  j["model"] = {{"curvature_weight", c.model_curvature_weight}, {"model_weight", c.model_weight}};
  j["shape_models"] = {{"left", c.left_model}, {"right", c.right_model}};
  j["resample"] = {{"coarse_mm", c.coarse_spacing_mm}, {"iso_mm", c.iso_spacing_mm}};
  j["distance_cap_mm"] = c.distance_cap_mm;
  j["threads"] = c.threads;
  return j;
}

/// Overlays the keys present in `j` onto `base`; unknown keys are errors.
inline PipelineConfig apply_config(PipelineConfig c, const json& j) {
  if (!j.is_object()) throw InvalidArgumentError("configuration must be an object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const json& v = *it;
      if (k == "lung") detail::read_params(v, c.lung);
      else if (k == "lesion") detail::read_params(v, c.lesion);
      else if (k == "model") {
        for (auto m = v.begin(); m != v.end(); ++m) {
          if (m.key() == "curvature_weight") c.model_curvature_weight = m->get<double>();
          else if (m.key() == "model_weight") c.model_weight = m->get<double>();
          else throw InvalidArgumentError("unknown model parameter '" + m.key() + "'");
        }
      } else if (k == "shape_models") {
        if (v.contains("left")) c.left_model = v["left"].get<std::string>();
        if (v.contains("right")) c.right_model = v["right"].get<std::string>();
      } else if (k == "resample") {
        if (v.contains("coarse_mm")) c.coarse_spacing_mm = v["coarse_mm"].get<double>();
        if (v.contains("iso_mm")) c.iso_spacing_mm = v["iso_mm"].get<double>();
      } else if (k == "distance_cap_mm") c.distance_cap_mm = v.get<double>();
      else if (k == "threads") c.threads = v.get<int>();
      else throw InvalidArgumentError("unknown configuration key '" + k + "'");
    }
  } catch (const json::exception& e) {
    throw InvalidArgumentError(std::string("bad configuration value: ") + e.what());
  }
  c.lung.threads = c.lesion.threads = c.threads;
  c.lung.distance_cap = c.lesion.distance_cap = c.distance_cap_mm;
  c.validate();
  return c;
}

/// Reads a JSON configuration; relative shape-model paths resolve against
/// the file's directory.
inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot read configuration " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed configuration: ") + e.what());
  }
  PipelineConfig c = apply_config({}, j);
  const auto base = path.parent_path();
  if (!c.left_model.empty() && std::filesystem::path(c.left_model).is_relative()) c.left_model = (base / c.left_model).string();
  if (!c.right_model.empty() && std::filesystem::path(c.right_model).is_relative()) c.right_model = (base / c.right_model).string();
  return c;
}

// ---- sessions -----------------------------------------------------------------

enum class Stage { loaded, lungs_auto, lungs_edited, lesions_auto, lesions_edited };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::loaded: return "loaded";
    case Stage::lungs_auto: return "lungs-auto";
    case Stage::lungs_edited: return "lungs-edited";
    case Stage::lesions_auto: return "lesions-auto";
    default: return "lesions-edited";
  }
}

inline Stage parse_stage(const std::string& s) {
  for (Stage st : {Stage::loaded, Stage::lungs_auto, Stage::lungs_edited, Stage::lesions_auto, Stage::lesions_edited})
    if (s == to_string(st)) return st;
  throw ParseError("unknown stage '" + s + "'");
}

/// One entry of a session's history: a stage run or an edit script.
struct HistoryOp {
  enum class Kind { lungs, lesions, edits } kind;
  PipelineConfig config;  // stage runs
  EditScript script;      // edits
};

/// Segmentation state on the working (isotropic, RAI) grid.
struct SessionMaps {
  std::optional<DistanceMap> left;
  std::optional<DistanceMap> right;
  std::optional<DistanceMap> lesions;
  Stage stage = Stage::loaded;

  bool operator==(const SessionMaps&) const = default;
};

class Session {
 public:
  Session(std::string id, Volume source, PipelineConfig config)
      : id_(std::move(id)), source_(std::move(source)), config_(std::move(config)) {
    config_.validate();
    const Volume rai = reorient_rai(source_);
    const double s = config_.iso_spacing_mm;
    image_ = std::make_shared<const Volume>(resample(rai, Vec3{s, s, s}, ResampleMethod::iso));
  }

  const std::string& id() const { return id_; }
  const Volume& source() const { return source_; }
  const Volume& image() const { return *image_; }
  std::shared_ptr<const Volume> image_ptr() const { return image_; }
  const PipelineConfig& config() const { return config_; }
  void set_config(PipelineConfig c) {
    c.validate();
    config_ = std::move(c);
  }
  Stage stage() const { return maps_.stage; }
  const SessionMaps& maps() const { return maps_; }
  const std::vector<HistoryOp>& history() const { return history_; }

  /// Map of a named target, if it exists yet.
  const std::optional<DistanceMap>& target(const std::string& name) const {
    if (name == "lungs-left") return maps_.left;
    if (name == "lungs-right") return maps_.right;
    if (name == "lesions") return maps_.lesions;
    throw InvalidArgumentError("unknown target '" + name + "'");
  }

  /// Stage 1: lung field, registration, model-based level sets.
  void run_lungs(bool force = false) {
    if (maps_.stage != Stage::loaded && !force)
      throw StageError("lungs", std::string("lung segmentation cannot run at stage ") + to_string(maps_.stage));
    HistoryOp op{HistoryOp::Kind::lungs, config_, {}};
    maps_ = apply_op(maps_, op);
    record(std::move(op));
  }

  /// Stage 3: lesion level set inside the lungs.
  void run_lesions(bool force = false) {
    const Stage s = maps_.stage;
    const bool ready = s == Stage::lungs_auto || s == Stage::lungs_edited;
    const bool rerun = s == Stage::lesions_auto || s == Stage::lesions_edited;
    if (!ready && !(rerun && force))
      throw StageError("lesions", std::string("lesion segmentation cannot run at stage ") + to_string(s));
    HistoryOp op{HistoryOp::Kind::lesions, config_, {}};
    maps_ = apply_op(maps_, op);
    record(std::move(op));
  }

  /// Applies a script; targets must exist at the current stage.
  void apply_edits(const EditScript& script) {
    HistoryOp op{HistoryOp::Kind::edits, {}, script};
    maps_ = apply_op(maps_, op);
    record(std::move(op));
  }

  /// Drops the last history entry: restores the latest stage-run snapshot
  /// and replays the edits after it (a full replay when the snapshot is
  /// not in memory, as after loading).
  void undo() {
    if (history_.empty()) throw InvalidArgumentError("nothing to undo");
    history_.pop_back();
    snapshots_.pop_back();
    std::size_t start = 0;
    SessionMaps state;
    for (std::size_t i = history_.size(); i-- > 0;) {
      if (history_[i].kind == HistoryOp::Kind::edits) continue;
      if (!snapshots_[i]) {
        replay(std::vector<HistoryOp>(history_));
        return;
      }
      state = *snapshots_[i];
      start = i + 1;
      break;
    }
    for (std::size_t i = start; i < history_.size(); ++i) state = apply_op(state, history_[i]);
    maps_ = std::move(state);
  }

  /// Replays a history from the loaded state.
  void replay(const std::vector<HistoryOp>& ops) {
    maps_ = SessionMaps{};
    history_.clear();
    snapshots_.clear();
    for (const auto& op : ops) {
      maps_ = apply_op(maps_, op);
      record(op);
    }
  }

  /// Restores persisted state without recomputation.
  void restore(SessionMaps maps, std::vector<HistoryOp> history) {
    maps_ = std::move(maps);
    history_ = std::move(history);
    snapshots_.assign(history_.size(), std::nullopt);
  }

  /// Lungs union masks the image (fill -2000 HU), then the multi-resolution
  /// lesion level set runs; no in-window voxel yields an empty map.
  static DistanceMap segment_lesions(const Volume& image, const DistanceMap& left, const DistanceMap& right,
                                     const PipelineConfig& c) {
    const Mask lungs = mask_union(positive_region(left), positive_region(right));
    const Volume masked = mask_volume(image, lungs, -2000.0f);
    try {
      return multires_levelset(masked, c.lesion);
    } catch (const EmptySeedError&) {
      return DistanceMap(image.geometry(), -c.distance_cap_mm);
    }
  }

 private:
  void record(HistoryOp op) {
    const bool stage_run = op.kind != HistoryOp::Kind::edits;
    history_.push_back(std::move(op));
    snapshots_.push_back(stage_run ? std::optional<SessionMaps>(maps_) : std::nullopt);
  }

  SessionMaps apply_op(const SessionMaps& in, const HistoryOp& op) const {
    SessionMaps out = in;
    const PipelineConfig& c = op.config;
    switch (op.kind) {
      case HistoryOp::Kind::lungs: {
        if (c.left_model.empty() || c.right_model.empty())
          throw StageError("shape_model", "configuration lacks shape model paths");
        const ShapeModel lm = detail::run_stage("shape_model", [&] { return load_shape_model(c.left_model); });
        const ShapeModel rm = detail::run_stage("shape_model", [&] { return load_shape_model(c.right_model); });
        LungSegmentationOptions o;
        o.field = c.lung;
        o.model = c.model_params();
        o.coarse_spacing = Vec3{c.coarse_spacing_mm, c.coarse_spacing_mm, c.coarse_spacing_mm};
        const LungSegmentation seg = segment_lungs(*image_, lm, rm, o);
        out.left = seg.left;
        out.right = seg.right;
        out.lesions.reset();
        out.stage = Stage::lungs_auto;
        break;
      }
      case HistoryOp::Kind::lesions: {
        out.lesions = detail::run_stage("lesions", [&] { return segment_lesions(*image_, *in.left, *in.right, c); });
        out.stage = Stage::lesions_auto;
        break;
      }
      case HistoryOp::Kind::edits: {
        EditState st;
        st.image = image_;
        st.cap = config_.distance_cap_mm;
        st.threads = config_.threads;
        const bool lungs_ready = in.stage != Stage::loaded;
        const bool lesions_ready = in.stage == Stage::lesions_auto || in.stage == Stage::lesions_edited;
        for (std::size_t i = 0; i < op.script.events.size(); ++i) {
          const auto& t = op.script.events[i].target;
          const bool lung_target = t == "lungs-left" || t == "lungs-right";
          if (!lung_target && t != "lesions") throw ScriptError(static_cast<long>(i), "unknown target '" + t + "'");
          if (lung_target && !lungs_ready) throw ScriptError(static_cast<long>(i), "lungs are not segmented yet");
          if (!lung_target && !lesions_ready) throw ScriptError(static_cast<long>(i), "lesions are not segmented yet");
        }
        if (in.left) st.targets.emplace("lungs-left", EditTarget(*in.left, st.cap, st.threads));
        if (in.right) st.targets.emplace("lungs-right", EditTarget(*in.right, st.cap, st.threads));
        if (in.lesions) st.targets.emplace("lesions", EditTarget(*in.lesions, st.cap, st.threads));
        st = apply_edit_script(std::move(st), op.script);
        if (in.left) out.left = st.targets.at("lungs-left").map();
        if (in.right) out.right = st.targets.at("lungs-right").map();
        if (in.lesions) out.lesions = st.targets.at("lesions").map();
        if (out.stage == Stage::lungs_auto) out.stage = Stage::lungs_edited;
        else if (out.stage == Stage::lesions_auto) out.stage = Stage::lesions_edited;
        else if (out.stage == Stage::loaded) throw ScriptError(-1, "nothing to edit before lung segmentation");
        break;
      }
    }
    return out;
  }

 private:
  std::string id_;
  Volume source_;
  std::shared_ptr<const Volume> image_;
  PipelineConfig config_;
  SessionMaps maps_;
  std::vector<HistoryOp> history_;
  std::vector<std::optional<SessionMaps>> snapshots_;  // state after each stage run
};

inline std::string new_session_id() {
  std::random_device rd;
  std::ostringstream o;
  o << std::hex;
  for (int i = 0; i < 4; ++i) o << ((rd() & 0xffff) | 0x10000) % 0x10000;
  std::string s = o.str();
  while (s.size() < 16) s = "0" + s;
  return s;
}

// ---- persistence ------------------------------------------------------------------

namespace detail {

inline json history_json(const std::vector<HistoryOp>& h) {
  json a = json::array();
  for (const auto& op : h) {
    json j;
    switch (op.kind) {
      case HistoryOp::Kind::lungs:
        j["op"] = "lungs";
        j["config"] = config_json(op.config);
        break;
      case HistoryOp::Kind::lesions:
        j["op"] = "lesions";
        j["config"] = config_json(op.config);
        break;
      case HistoryOp::Kind::edits:
        j["op"] = "edits";
        j["script"] = json::parse(to_json(op.script));
        break;
    }
    a.push_back(std::move(j));
  }
  return a;
}

inline std::vector<HistoryOp> parse_history(const json& a) {
  std::vector<HistoryOp> out;
  for (const auto& j : a) {
    const std::string op = j.at("op").get<std::string>();
    if (op == "lungs") out.push_back({HistoryOp::Kind::lungs, apply_config({}, j.at("config")), {}});
    else if (op == "lesions") out.push_back({HistoryOp::Kind::lesions, apply_config({}, j.at("config")), {}});
    else if (op == "edits") out.push_back({HistoryOp::Kind::edits, {}, parse_edit_script(j.at("script").dump())});
    else throw ParseError("unknown history op '" + op + "'");
  }
  return out;
}

inline void write_map(const std::filesystem::path& p, const std::optional<DistanceMap>& d) {
  if (d) write_nifti(p, *d);
  else std::filesystem::remove(p);
}

}  // namespace detail

/// Session directory: session.json, source.nii.gz and float64 maps.
inline void save_session(const std::filesystem::path& dir, const Session& s) {
  std::filesystem::create_directories(dir);
  const auto src = dir / "source.nii.gz";
  if (!std::filesystem::exists(src)) write_nifti(src, s.source());
  detail::write_map(dir / "lungs-left.nii.gz", s.maps().left);
  detail::write_map(dir / "lungs-right.nii.gz", s.maps().right);
  detail::write_map(dir / "lesions.nii.gz", s.maps().lesions);
  json j;
  j["id"] = s.id();
  j["stage"] = to_string(s.stage());
  j["config"] = config_json(s.config());
  j["history"] = detail::history_json(s.history());
  const auto tmp = dir / "session.json.tmp";
  {
    std::ofstream f(tmp);
    f << j.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, dir / "session.json");
}

inline Session load_session(const std::filesystem::path& dir) {
  std::ifstream f(dir / "session.json");
  if (!f) throw ParseError("no session in " + dir.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed session file: ") + e.what());
  }
  Session s(j.at("id").get<std::string>(), read_volume(dir / "source.nii.gz"), apply_config({}, j.at("config")));
  SessionMaps m;
  m.stage = parse_stage(j.at("stage").get<std::string>());
  auto load = [&](const char* name) -> std::optional<DistanceMap> {
    const auto p = dir / name;
    if (!std::filesystem::exists(p)) return std::nullopt;
    // Header geometry is single precision; reattach the exact grid.
    DistanceMap d = read_distance_map(p);
    require_same_geometry(d.geometry(), s.image().geometry(), name);
    return DistanceMap(s.image().geometry(), std::vector<double>(d.voxels().begin(), d.voxels().end()));
  };
  m.left = load("lungs-left.nii.gz");
  m.right = load("lungs-right.nii.gz");
  m.lesions = load("lesions.nii.gz");
  s.restore(std::move(m), detail::parse_history(j.at("history")));
  return s;
}

/// Mask of a target resampled (nearest neighbour) onto the source grid.
inline Mask export_mask(const Session& s, const std::string& target) {
  const auto& d = s.target(target);
  if (!d) throw InvalidArgumentError("target '" + target + "' has not been segmented");
  return resample_nearest_onto(positive_region(*d), s.source().geometry(), std::uint8_t{0});
}

// ---- evaluation from disk -------------------------------------------------------

/// Reads {"raters": [{"id": ..., "group": "expert|novice|reference"}]}.
inline std::vector<Rater> load_groups(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot read rater groups " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed rater groups: ") + e.what());
  }
  std::vector<Rater> out;
  for (const auto& r : j.at("raters")) out.push_back({r.at("id").get<std::string>(), parse_group(r.at("group").get<std::string>())});
  if (out.empty()) throw InvalidArgumentError("no raters listed");
  return out;
}

/// One sub-directory per case holding <rater>.nii.gz (or .nii) masks.
inline RaterSet load_rater_set(const std::filesystem::path& cases, const std::vector<Rater>& raters) {
  RaterSet rs;
  rs.raters = raters;
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(cases))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw IncompleteGridError("no case directories under " + cases.string());
  for (const auto& d : dirs) {
    rs.case_ids.push_back(d.filename().string());
    std::vector<Mask> row;
    for (const auto& r : raters) {
      auto p = d / (r.id + ".nii.gz");
      if (!std::filesystem::exists(p)) p = d / (r.id + ".nii");
      if (!std::filesystem::exists(p))
        throw IncompleteGridError("case " + d.filename().string() + " has no mask for rater " + r.id);
      row.push_back(read_mask(p));
    }
    rs.masks.push_back(std::move(row));
  }
  rs.validate();
  return rs;
}

}  // namespace covseg
