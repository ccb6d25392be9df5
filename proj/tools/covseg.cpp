// Command-line front end: batch pipeline, evaluation, model building and
// the local HTTP service.

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>

#include "covseg/covseg.hpp"
#include "covseg/service.hpp"

namespace fs = std::filesystem;
using namespace covseg;

namespace {

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw InvalidArgumentError("cannot write " + p.string());
  f << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw ParseError("cannot read " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Session directory plus native-grid masks and meshes of every target.
void write_outputs(const fs::path& out, const Session& s) {
  save_session(out, s);
  for (const std::string t : {"lungs-left", "lungs-right", "lesions"}) {
    const auto& d = s.target(t);
    if (!d) continue;
    write_nifti(out / (t + "-mask.nii.gz"), export_mask(s, t));
    try {
      write_obj(out / (t + ".obj"), extract_mesh(*d));
    } catch (const EmptySurfaceError&) {
    }
  }
}

httplib::Server* g_server = nullptr;

void stop_server(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"covseg: lung and lesion annotation toolkit"};
  app.require_subcommand(1);

  std::string input, config_path, out, session_dir, script_path, cases, groups, side, data_dir, target;
  std::vector<std::string> maps;
  bool force = false, from_masks = false;
  int threads = 1, port = 8080, training = 0;
  std::string host = "127.0.0.1";
  std::uint64_t seed = 1;

  auto* lungs = app.add_subcommand("segment-lungs", "Create a session from a CT volume and run the lung stage");
  lungs->add_option("input", input, "CT volume (NIfTI)")->required()->check(CLI::ExistingFile);
  lungs->add_option("--config", config_path, "Pipeline configuration (JSON)")->check(CLI::ExistingFile);
  lungs->add_option("--out", out, "Session directory")->required();

  auto* lesions = app.add_subcommand("segment-lesions", "Run the lesion stage on a session");
  lesions->add_option("session", session_dir, "Session directory")->required()->check(CLI::ExistingDirectory);
  lesions->add_option("--out", out, "Output session directory (default: in place)");
  lesions->add_option("--config", config_path, "Replace the session configuration")->check(CLI::ExistingFile);
  lesions->add_flag("--force", force, "Re-run over an existing lesion result");

  auto* edit = app.add_subcommand("edit", "Apply an edit script to a session");
  edit->add_option("session", session_dir, "Session directory")->required()->check(CLI::ExistingDirectory);
  edit->add_option("--script", script_path, "Edit script (JSON)")->required()->check(CLI::ExistingFile);
  edit->add_option("--out", out, "Output session directory (default: in place)");

  auto* undo = app.add_subcommand("undo", "Drop the last history entry of a session");
  undo->add_option("session", session_dir, "Session directory")->required()->check(CLI::ExistingDirectory);

  auto* exp = app.add_subcommand("export", "Write a target mask on the native grid");
  exp->add_option("session", session_dir, "Session directory")->required()->check(CLI::ExistingDirectory);
  exp->add_option("--target", target, "lungs-left, lungs-right or lesions")->required();
  exp->add_option("--out", out, "Output NIfTI file")->required();

  auto* evaluate = app.add_subcommand("evaluate", "Inter-observer agreement over a case directory");
  evaluate->add_option("--cases", cases, "Directory of case sub-directories")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--groups", groups, "Rater grouping (JSON)")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--out", out, "Output directory")->required();
  evaluate->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* build = app.add_subcommand("build-model", "Build a PCA shape model from aligned training shapes");
  build->add_option("maps", maps, "Signed distance maps (or masks with --masks)")->required()->check(CLI::ExistingFile);
  build->add_option("--side", side, "left or right")->required();
  build->add_option("--out", out, "Model directory")->required();
  build->add_flag("--masks", from_masks, "Inputs are binary masks");

  auto* serve = app.add_subcommand("serve", "Run the local HTTP service");
  serve->add_option("--port", port, "TCP port")->check(CLI::Range(1, 65535));
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--data", data_dir, "Session store")->required();
  serve->add_option("--config", config_path, "Default pipeline configuration")->check(CLI::ExistingFile);

  auto* phantom_cmd = app.add_subcommand("make-phantom", "Write a synthetic chest CT with ground truth");
  phantom_cmd->add_option("--out", out, "Output directory")->required();
  phantom_cmd->add_option("--training", training, "Also write N jittered training lungs per side");
  phantom_cmd->add_option("--seed", seed, "Training jitter seed");

  CLI11_PARSE(app, argc, argv);

  try {
    auto config = [&] { return config_path.empty() ? PipelineConfig{} : load_config(config_path); };

    if (*lungs) {
      Session s(new_session_id(), read_volume(input), config());
      s.run_lungs();
      write_outputs(out, s);
      std::cout << s.id() << " " << to_string(s.stage()) << "\n";
    } else if (*lesions) {
      Session s = load_session(session_dir);
      if (!config_path.empty()) s.set_config(config());
      s.run_lesions(force);
      write_outputs(out.empty() ? fs::path(session_dir) : fs::path(out), s);
      std::cout << s.id() << " " << to_string(s.stage()) << "\n";
    } else if (*edit) {
      Session s = load_session(session_dir);
      s.apply_edits(parse_edit_script(read_text(script_path)));
      write_outputs(out.empty() ? fs::path(session_dir) : fs::path(out), s);
      std::cout << s.id() << " " << to_string(s.stage()) << "\n";
    } else if (*undo) {
      Session s = load_session(session_dir);
      s.undo();
      write_outputs(session_dir, s);
      std::cout << s.id() << " " << to_string(s.stage()) << "\n";
    } else if (*exp) {
      write_nifti(out, export_mask(load_session(session_dir), target));
    } else if (*evaluate) {
      const RaterSet rs = load_rater_set(cases, load_groups(groups));
      const AgreementReport rep = volume_stats(rs, threads);
      fs::create_directories(out);
      write_text(fs::path(out) / "report.csv", report_csv(rep));
      write_text(fs::path(out) / "bland_altman.csv", bland_altman_csv(rep));
      const std::string text = report_text(rep);
      write_text(fs::path(out) / "summary.txt", text);
      std::cout << text;
    } else if (*build) {
      std::vector<DistanceMap> training_maps;
      for (const auto& m : maps) training_maps.push_back(from_masks ? signed_distance(read_mask(m)) : read_distance_map(m));
      const ShapeModel model = build_shape_model(training_maps, parse_side(side));
      save_shape_model(out, model);
      std::cout << "modes " << model.components.size() << "\n";
    } else if (*serve) {
      Service service(data_dir, config());
      httplib::Server server;
      service.mount(server);
      g_server = &server;
      std::signal(SIGINT, stop_server);
      std::signal(SIGTERM, stop_server);
      std::cout << "listening on " << host << ":" << port << std::endl;
      if (!server.listen(host, port)) throw InvalidArgumentError("cannot bind " + host + ":" + std::to_string(port));
    } else if (*phantom_cmd) {
      phantom::ChestSpec spec;
      spec.lesions.push_back({phantom::Ellipsoid{{91.5, 63.5, 63.5}, {10, 10, 10}}, -400});
      const phantom::Chest chest = phantom::make_chest(spec);
      const fs::path dir(out);
      fs::create_directories(dir);
      write_nifti(dir / "ct.nii.gz", chest.ct);
      write_nifti(dir / "lungs-left.nii.gz", chest.left);
      write_nifti(dir / "lungs-right.nii.gz", chest.right);
      write_nifti(dir / "lesion.nii.gz", chest.lesions.front());
      const Geometry g = phantom::chest_geometry(spec);
      for (const auto& [name, lung, offset] : {std::tuple{"left", spec.left_lung, 1}, std::tuple{"right", spec.right_lung, 2}}) {
        if (training <= 0) break;
        const auto family = phantom::lung_family_maps(g, lung, training, seed * 10 + offset);
        for (std::size_t i = 0; i < family.size(); ++i) {
          char file[64];
          std::snprintf(file, sizeof file, "train-%s-%03zu.nii.gz", name, i);
          write_distance_map_f32(dir / file, family[i]);
        }
      }
    }
  } catch (const ScriptError& e) {
    std::cerr << "script error (event " << e.event_index() << "): " << e.what() << "\n";
    return 3;
  } catch (const StageError& e) {
    std::cerr << "stage error [" << e.stage() << "]: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
