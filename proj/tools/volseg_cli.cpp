// volseg: command-line front end for curation, inference, training, evaluation and serving.
#include <malloc.h>

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include "volseg/curate.hpp"
#include "volseg/evalbench.hpp"
#include "volseg/infer.hpp"
#include "volseg/nifti.hpp"
#include "volseg/segserve.hpp"
#include "volseg/train.hpp"

#include <CLI11.hpp>

using namespace volseg;

namespace {

// Autodiff tapes allocate and free large buffers every step; keep them off mmap.
void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, std::numeric_limits<int>::max());
  mallopt(M_TOP_PAD, 256 << 20);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, sep);)
    if (!part.empty()) out.push_back(part);
  return out;
}

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  for (const auto& p : split(s, ',')) out.push_back(std::stoi(p));
  return out;
}

PointPrompt parse_click(const std::string& s) {
  const auto parts = split(s, ',');
  if (parts.size() != 4 || (parts[3] != "+" && parts[3] != "-")) {
    throw Error(Errc::config, "click must look like i,j,k,+ or i,j,k,- (got " + s + ")");
  }
  return {{std::stoi(parts[0]), std::stoi(parts[1]), std::stoi(parts[2])},
          parts[3] == "+" ? PromptLabel::positive : PromptLabel::negative};
}

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(Errc::io, "cannot open " + p.string());
  return nlohmann::json::parse(in);
}

net::NetConfig net_preset(const std::string& name) {
  if (name == "reference") return net::NetConfig::reference();
  if (name == "desk") return net::NetConfig::desk();
  if (name == "test") return net::NetConfig::test();
  if (name == "tiny") return net::NetConfig::tiny();
  throw Error(Errc::config, "unknown net preset " + name);
}

serve::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server != nullptr) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Interactive volumetric segmentation toolkit"};
  app.require_subcommand(1);

  // curate
  auto* curate_cmd = app.add_subcommand("curate", "Clean a labelled dataset and write a curation report");
  std::string c_manifest, c_out, c_symmetric;
  int c_conn = 26;
  curate::Config c_cfg;
  curate_cmd->add_option("--manifest", c_manifest, "Input manifest JSON")->required();
  curate_cmd->add_option("--out-dir", c_out, "Output directory")->required();
  curate_cmd->add_option("--symmetric-classes", c_symmetric, "Comma-separated classes to split left/right");
  curate_cmd->add_option("--connectivity", c_conn, "6 or 26")->check(CLI::IsMember({6, 26}));
  curate_cmd->add_option("--midplane-axis", c_cfg.midplane_axis, "Axis split by the symmetry step")->check(CLI::Range(0, 2));
  curate_cmd->add_option("--keep-components", c_cfg.keep_components, "Largest components kept per mask");

  // infer
  auto* infer_cmd = app.add_subcommand("infer", "Segment a volume from point clicks");
  std::string i_volume, i_ckpt, i_out;
  std::vector<std::string> i_clicks;
  double i_threshold = 0.5;
  infer_cmd->add_option("--volume", i_volume, "Input NIfTI volume")->required();
  infer_cmd->add_option("--click", i_clicks, "Voxel click i,j,k,+ or i,j,k,-; repeatable")->required();
  infer_cmd->add_option("--checkpoint", i_ckpt, "Model weights")->required();
  infer_cmd->add_option("--out", i_out, "Output mask NIfTI")->required();
  infer_cmd->add_option("--threshold", i_threshold, "Probability threshold");

  // train
  auto* train_cmd = app.add_subcommand("train", "Run a training stage");
  std::string t_stage = "pretrain", t_manifest, t_config, t_out, t_init, t_report, t_net = "desk";
  std::uint64_t t_seed = 0;
  train_cmd->add_option("--stage", t_stage, "pretrain or finetune")->check(CLI::IsMember({"pretrain", "finetune"}));
  train_cmd->add_option("--manifest", t_manifest, "Training manifest")->required();
  train_cmd->add_option("--config", t_config, "Training config JSON");
  train_cmd->add_option("--out", t_out, "Checkpoint directory")->required();
  train_cmd->add_option("--init", t_init, "Starting checkpoint (required for finetune)");
  train_cmd->add_option("--report", t_report, "Curation report; finetune trains on its high-quality subset");
  train_cmd->add_option("--net", t_net, "Network preset for a fresh model: reference, desk, test, tiny");
  train_cmd->add_option("--init-seed", t_seed, "Seed for a fresh model");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Simulated-click evaluation sweep");
  std::string e_manifest, e_ckpt, e_report, e_budgets = "1,3,5,10", e_seen;
  std::uint64_t e_seed = 7;
  eval_cmd->add_option("--manifest", e_manifest, "Evaluation manifest")->required();
  eval_cmd->add_option("--checkpoint", e_ckpt, "Model weights")->required();
  eval_cmd->add_option("--budgets", e_budgets, "Comma-separated click budgets");
  eval_cmd->add_option("--seed", e_seed, "Click simulation seed");
  eval_cmd->add_option("--seen-classes", e_seen, "Comma-separated classes seen in training");
  eval_cmd->add_option("--report", e_report, "Report directory")->required();

  // time
  auto* time_cmd = app.add_subcommand("time", "Interaction cost of a prompting method");
  std::string m_method = "sammed3d";
  int m_slices = 1, m_k = 1;
  double m_tau = 1.0;
  time_cmd->add_option("--method", m_method, "sam2d, sammed2d or sammed3d");
  time_cmd->add_option("--slices", m_slices, "Slices containing the target");
  time_cmd->add_option("--tau", m_tau, "Seconds per click");
  time_cmd->add_option("--points", m_k, "Points per prompt");

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "HTTP segmentation service; SEG_* variables set defaults");
  serve::ServerConfig s_cfg;
  try {
    s_cfg = serve::ServerConfig::from_env();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::string s_ckpt = s_cfg.checkpoint ? s_cfg.checkpoint->string() : "";
  serve_cmd->add_option("--host", s_cfg.host, "Bind address");
  serve_cmd->add_option("--port", s_cfg.port, "Port, 0 picks a free one");
  serve_cmd->add_option("--checkpoint", s_ckpt, "Model weights");
  serve_cmd->add_option("--max-sessions", s_cfg.max_sessions, "Live sessions before eviction");
  serve_cmd->add_option("--max-volume-mb", s_cfg.max_volume_mb, "Upload size limit");

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic labelled dataset");
  train::SyntheticSpec y_spec;
  std::string y_out, y_families = "ellipsoid,tube,multi_blob";
  std::uint64_t y_seed = 1;
  int y_size = 64;
  synth_cmd->add_option("--out-dir", y_out, "Output directory")->required();
  synth_cmd->add_option("--count", y_spec.count, "Number of cases");
  synth_cmd->add_option("--size", y_size, "Cubic volume edge in voxels");
  synth_cmd->add_option("--families", y_families, "Comma-separated shape families");
  synth_cmd->add_option("--size-min-mm", y_spec.size_min_mm, "Smallest target diameter");
  synth_cmd->add_option("--size-max-mm", y_spec.size_max_mm, "Largest target diameter");
  synth_cmd->add_option("--objects", y_spec.objects, "Targets per case");
  synth_cmd->add_option("--noise", y_spec.noise, "Gaussian noise sigma");
  synth_cmd->add_option("--label-noise", y_spec.label_noise_fraction, "Share of cases with speckled labels");
  synth_cmd->add_option("--seed", y_seed, "Generator seed");

  // export-encoder
  auto* export_cmd = app.add_subcommand("export-encoder", "Write the image-encoder weights only");
  std::string x_ckpt, x_out;
  export_cmd->add_option("--checkpoint", x_ckpt, "Full model weights")->required();
  export_cmd->add_option("--out", x_out, "Encoder weights file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*curate_cmd) {
      c_cfg.connectivity = c_conn == 6 ? Connectivity::six : Connectivity::twenty_six;
      c_cfg.symmetric_classes = split(c_symmetric, ',');
      const auto r = curate::curate_dataset(load_manifest(c_manifest), c_cfg, c_out);
      save_manifest(std::filesystem::path(c_out) / "manifest.json", r.manifest);
      std::ofstream(std::filesystem::path(c_out) / "curation_report.json") << curate::to_json(r.report).dump(2) << "\n";
      std::cout << "curated " << r.manifest.entries.size() << " cases into " << c_out << "\n";
    } else if (*infer_cmd) {
      std::vector<PointPrompt> clicks;
      for (const auto& c : i_clicks) clicks.push_back(parse_click(c));
      const auto state = net::load_state(i_ckpt);
      const auto volume = nifti::read_volume(i_volume);
      const auto r = infer::segment_volume(volume, clicks, state, i_threshold);
      nifti::write_mask(i_out, r.mask, volume.spacing);
      std::cout << "mask voxels " << r.mask.count() << ", windows " << r.windows.size() << "\n";
    } else if (*train_cmd) {
      train::TrainConfig cfg;
      if (!t_config.empty()) cfg = read_json(t_config).get<train::TrainConfig>();
      cfg.stage = t_stage == "finetune" ? train::Stage::finetune : train::Stage::pretrain;
      if (cfg.stage == train::Stage::finetune && t_init.empty()) {
        throw Error(Errc::config, "finetune needs --init with a stage-1 checkpoint");
      }
      auto state = t_init.empty() ? net::ModelState::create(net_preset(t_net), t_seed) : net::load_state(t_init);
      auto data = load_manifest(t_manifest).only(Split::train);
      if (!t_report.empty()) {
        const auto sel = train::select_high_quality(data, curate::report_from_json(read_json(t_report)));
        std::cout << "high-quality subset keeps " << sel.manifest.entries.size() << " of " << data.entries.size()
                  << " cases (" << sel.retained_fraction << ")\n";
        data = sel.manifest;
      }
      const auto r = train::train_stage(std::move(state), data, cfg, std::filesystem::path(t_out));
      if (!r.log.empty()) std::cout << "final loss " << r.log.back().loss << ", dice " << r.log.back().dice << "\n";
    } else if (*eval_cmd) {
      eval::SweepOptions opt;
      opt.budgets = parse_ints(e_budgets);
      opt.seed = e_seed;
      if (!e_seen.empty()) {
        const auto names = split(e_seen, ',');
        opt.seen_classes = std::set<std::string>(names.begin(), names.end());
      }
      const auto records = eval::run_prompt_sweep(net::load_state(e_ckpt), load_manifest(e_manifest), opt);
      eval::write_report_dir(e_report, records);
      if (!records.empty()) std::cout << eval::aggregate_report(records, eval::GroupBy::organ).table();
    } else if (*time_cmd) {
      std::cout << eval::interaction_time(eval::parse_method(m_method), m_slices, m_tau, m_k) << "\n";
    } else if (*serve_cmd) {
      if (s_ckpt.empty()) throw Error(Errc::config, "serve needs --checkpoint or SEG_CHECKPOINT");
      const auto state = net::load_state(s_ckpt);
      infer::Options opt;
      opt.patch_size = state.config().patch_input_size;
      serve::SessionManager::Limits lim;
      lim.max_sessions = s_cfg.max_sessions;
      lim.max_volume_bytes = s_cfg.max_volume_mb << 20;
      serve::SessionManager sessions(infer::network_model(state), opt, lim);
      serve::Server server(sessions, 2 * lim.max_volume_bytes);
      const int port = server.bind(s_cfg.host, s_cfg.port);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "listening on " << s_cfg.host << ":" << port << std::endl;
      server.run();
      g_server = nullptr;
    } else if (*synth_cmd) {
      y_spec.dims = {y_size, y_size, y_size};
      y_spec.families.clear();
      for (const auto& f : split(y_families, ',')) {
        if (f == "ellipsoid") y_spec.families.push_back(train::Shape::ellipsoid);
        else if (f == "tube") y_spec.families.push_back(train::Shape::tube);
        else if (f == "multi_blob") y_spec.families.push_back(train::Shape::multi_blob);
        else throw Error(Errc::config, "unknown shape family " + f);
      }
      std::mt19937_64 rng(y_seed);
      const auto m = train::make_synthetic_dataset(y_spec, rng, y_out);
      std::cout << "wrote " << m.entries.size() << " cases to " << y_out << "\n";
    } else if (*export_cmd) {
      net::export_encoder(net::load_state(x_ckpt), x_out);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
