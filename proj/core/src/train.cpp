#include "volseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <numeric>

#include "volseg/infer.hpp"
#include "volseg/nifti.hpp"
#include "volseg/promptsim.hpp"

namespace volseg::train {

void TrainConfig::validate() const {
  if (epochs < 0) throw Error(Errc::config, "epochs must be non-negative");
  if (max_steps && *max_steps < 0) throw Error(Errc::config, "max_steps must be non-negative");
  if (batch < 1) throw Error(Errc::config, "batch must be at least 1");
  if (clicks_per_sample < 1) throw Error(Errc::config, "clicks_per_sample must be at least 1");
  if (dice_w < 0.0 || ce_w < 0.0 || dice_w + ce_w <= 0.0) {
    throw Error(Errc::config, "loss weights must be non-negative and not both zero");
  }
  if (!(lr > 0.0) || lr_min < 0.0 || lr_min > lr) throw Error(Errc::config, "bad learning-rate range");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw Error(Errc::config, "betas must be in [0, 1)");
}

namespace {

std::string_view stage_name(Stage s) { return s == Stage::pretrain ? "pretrain" : "finetune"; }

Stage parse_stage(const std::string& s) {
  if (s == "pretrain") return Stage::pretrain;
  if (s == "finetune") return Stage::finetune;
  throw Error(Errc::config, "unknown stage " + s);
}

}  // namespace

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"stage", stage_name(c.stage)},
                     {"epochs", c.epochs},
                     {"batch", c.batch},
                     {"lr", c.lr},
                     {"lr_min", c.lr_min},
                     {"warmup_steps", c.warmup_steps},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"grad_clip", c.grad_clip},
                     {"clicks_per_sample", c.clicks_per_sample},
                     {"dice_w", c.dice_w},
                     {"ce_w", c.ce_w},
                     {"normalization", c.normalization},
                     {"seed", c.seed},
                     {"checkpoint_every", c.checkpoint_every}};
  if (c.max_steps) j["max_steps"] = *c.max_steps;
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.stage = parse_stage(j.value("stage", std::string(stage_name(d.stage))));
  c.epochs = j.value("epochs", d.epochs);
  c.max_steps = j.contains("max_steps") ? std::optional<int>(j.at("max_steps").get<int>()) : std::nullopt;
  c.batch = j.value("batch", d.batch);
  c.lr = j.value("lr", d.lr);
  c.lr_min = j.value("lr_min", d.lr_min);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.clicks_per_sample = j.value("clicks_per_sample", d.clicks_per_sample);
  c.dice_w = j.value("dice_w", d.dice_w);
  c.ce_w = j.value("ce_w", d.ce_w);
  c.normalization = j.contains("normalization") ? j.at("normalization").get<intensity::Policy>() : d.normalization;
  c.seed = j.value("seed", d.seed);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
}

void to_json(nlohmann::json& j, const LogEntry& e) {
  j = nlohmann::json{{"step", e.step}, {"loss", e.loss}, {"dice", e.dice}};
}

std::vector<Sample> load_samples(const DatasetManifest& manifest, const intensity::Policy& policy) {
  std::vector<Sample> out;
  for (const auto& e : manifest.entries) {
    const auto id = case_id(e);
    try {
      const Volume v = intensity::normalize(nifti::read_volume(e.image_path), policy);
      const LabelVolume lv = nifti::read_labels(e.label_path);
      if (lv.dims != v.dims) throw Error(Errc::shape, "image and label dims differ");
      for (const auto& [cls, name] : e.class_map) {
        BinaryMask m = lv.one_hot(cls);
        if (m.empty()) continue;
        out.push_back({id, name, v, std::move(m)});
      }
    } catch (const Error& err) {
      std::cerr << "train: skipping " << id << ": " << err.what() << '\n';
    }
  }
  return out;
}

namespace {

ad::Tensor target_column(const BinaryMask& m) {
  ad::Tensor t(static_cast<int>(m.size()), 1);
  for (std::size_t i = 0; i < m.size(); ++i) t.data[i] = m.data[i] ? 1.0 : 0.0;
  return t;
}

BinaryMask crop_mask(const BinaryMask& m, const Vec3i& origin, int size) {
  BinaryMask out({size, size, size});
  for (int k = 0; k < size; ++k) {
    for (int j = 0; j < size; ++j) {
      for (int i = 0; i < size; ++i) {
        const Vec3i g{origin[0] + i, origin[1] + j, origin[2] + k};
        if (in_bounds(m.dims, g)) out.at(i, j, k) = m.at(g);
      }
    }
  }
  return out;
}

BinaryMask threshold(const Grid<double>& prob, double t) {
  BinaryMask out(prob.dims);
  for (std::size_t i = 0; i < prob.size(); ++i) out.data[i] = prob.data[i] > t ? 1 : 0;
  return out;
}

double hard_dice(const ad::Tensor& logits, const BinaryMask& gt) {
  std::size_t inter = 0;
  std::size_t a = 0;
  std::size_t b = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool p = logits.data[i] > 0.0;
    const bool g = gt.data[i] != 0;
    a += p;
    b += g;
    inter += p && g;
  }
  return a + b == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

double learning_rate(const TrainConfig& c, int step, int total) {
  if (c.warmup_steps > 0 && step < c.warmup_steps) return c.lr * (step + 1) / c.warmup_steps;
  const int span = std::max(1, total - c.warmup_steps);
  const double t = std::clamp(static_cast<double>(step - c.warmup_steps) / span, 0.0, 1.0);
  return c.lr_min + 0.5 * (c.lr - c.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

struct Moments {
  std::vector<ad::Tensor> m;
  std::vector<ad::Tensor> v;
};

}  // namespace

double loss(const Grid<double>& logits, const BinaryMask& gt, double dice_w, double ce_w) {
  if (logits.dims != gt.dims) throw Error(Errc::shape, "loss: logits and gt dims differ");
  ad::Tape tape(false);
  ad::Tensor x(static_cast<int>(logits.size()), 1);
  x.data.assign(logits.data.begin(), logits.data.end());
  return ad::dice_bce_loss(tape.constant(std::move(x)), target_column(gt), dice_w, ce_w).value().data[0];
}

int total_steps(const TrainConfig& cfg, std::size_t samples) {
  const auto per_epoch = static_cast<long long>((samples + cfg.batch - 1) / cfg.batch);
  long long total = per_epoch * cfg.epochs;
  if (cfg.max_steps) total = std::min<long long>(total, *cfg.max_steps);
  return static_cast<int>(total);
}

TrainResult train_stage(net::ModelState state, std::span<const Sample> samples, const TrainConfig& cfg,
                        const std::optional<std::filesystem::path>& out_dir) {
  cfg.validate();
  TrainResult res;
  const int total = total_steps(cfg, samples.size());
  if (total == 0) {
    res.state = std::move(state);
    return res;
  }
  if (samples.empty()) throw Error(Errc::config, "train_stage: no samples");
  const int P = state.config().patch_input_size;
  for (const auto& s : samples) {
    if (s.gt.dims != s.volume.dims) throw Error(Errc::shape, "sample " + s.case_id + ": gt and volume dims differ");
  }

  std::ofstream metrics;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    metrics.open(*out_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw Error(Errc::io, "cannot write metrics log in " + out_dir->string());
  }

  std::mt19937_64 rng(cfg.seed);
  auto& params = state.params();
  Moments mom;
  for (const auto& p : params) {
    mom.m.emplace_back(p.value.rows, p.value.cols, 0.0);
    mom.v.emplace_back(p.value.rows, p.value.cols, 0.0);
  }

  std::vector<std::size_t> order(samples.size());
  std::size_t cursor = order.size();
  auto next_sample = [&]() -> const Sample& {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    return samples[order[cursor++]];
  };

  for (int step = 0; step < total; ++step) {
    state.zero_grad();
    double step_loss = 0.0;
    double step_dice = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const Sample& s = next_sample();
      const PointPrompt first = promptsim::first_click(s.gt, rng);
      const Vec3i origin = infer::crop_origin(s.volume.dims, first.coord, P);
      const Volume patch = infer::extract(s.volume, origin, P);
      const BinaryMask gtp = crop_mask(s.gt, origin, P);
      std::vector<PointPrompt> clicks{
          {{first.coord[0] - origin[0], first.coord[1] - origin[1], first.coord[2] - origin[2]}, first.label}};

      // Loss is taken after a uniformly drawn number of rounds; later rounds cannot affect it.
      const int rounds = std::uniform_int_distribution<int>(1, cfg.clicks_per_sample)(rng);
      for (int r = 1; r < rounds; ++r) {
        const BinaryMask pred = threshold(net::forward(patch, clicks, state), 0.5);
        if (pred.data == gtp.data) break;
        clicks.push_back(promptsim::next_click(gtp, pred, rng, clicks));
      }

      ad::Tape tape;
      const ad::Tensor col = net::patch_column(patch, P);
      ad::Var logits = net::forward_logits(tape, col, clicks, state);
      ad::Var l = ad::dice_bce_loss(logits, target_column(gtp), cfg.dice_w, cfg.ce_w);
      const double lv = l.value().data[0];
      if (!std::isfinite(lv)) {
        throw Error(Errc::non_finite, "step " + std::to_string(step) + ": non-finite loss on " + s.case_id + "/" +
                                          s.class_name + " with " + std::to_string(clicks.size()) + " clicks");
      }
      step_loss += lv;
      step_dice += hard_dice(logits.value(), gtp);
      tape.backward(l);
    }
    step_loss /= cfg.batch;
    step_dice /= cfg.batch;

    double norm2 = 0.0;
    for (auto& p : params) {
      if (!p.trainable || p.grad.size() == 0) continue;
      for (auto& g : p.grad.data) {
        g /= cfg.batch;
        norm2 += g * g;
      }
    }
    if (!std::isfinite(norm2)) {
      throw Error(Errc::non_finite, "step " + std::to_string(step) + ": non-finite gradient");
    }
    const double scale = cfg.grad_clip > 0.0 && std::sqrt(norm2) > cfg.grad_clip ? cfg.grad_clip / std::sqrt(norm2) : 1.0;
    const double lr = learning_rate(cfg, step, total);
    const double bc1 = cfg.beta1 > 0.0 ? 1.0 - std::pow(cfg.beta1, step + 1) : 1.0;
    const double bc2 = 1.0 - std::pow(cfg.beta2, step + 1);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.trainable || p.grad.size() == 0) continue;
      auto& m = mom.m[i].data;
      auto& v = mom.v[i].data;
      for (std::size_t e = 0; e < p.value.data.size(); ++e) {
        const double g = p.grad.data[e] * scale;
        m[e] = cfg.beta1 * m[e] + (1.0 - cfg.beta1) * g;
        v[e] = cfg.beta2 * v[e] + (1.0 - cfg.beta2) * g * g;
        p.value.data[e] -= lr * (m[e] / bc1) / (std::sqrt(v[e] / bc2) + cfg.eps);
      }
    }

    const LogEntry entry{step + 1, step_loss, step_dice};
    res.log.push_back(entry);
    if (metrics) metrics << nlohmann::json(entry).dump() << '\n';
    if (out_dir && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      net::save_state(*out_dir / ("step_" + std::to_string(step + 1) + ".bin"), state);
    }
  }
  state.zero_grad();
  if (out_dir) net::save_state(*out_dir / "final.bin", state);
  res.state = std::move(state);
  return res;
}

TrainResult train_stage(net::ModelState state, const DatasetManifest& data, const TrainConfig& cfg,
                        const std::optional<std::filesystem::path>& out_dir) {
  const auto samples = load_samples(data, cfg.normalization);
  return train_stage(std::move(state), samples, cfg, out_dir);
}

QualityCriteria default_quality(const curate::Config& cfg) {
  const double min_fraction = 2.0 * (100.0 - cfg.max_background_percent) / 100.0;
  // Records of dropped classes describe masks the curated entry no longer carries.
  return [min_fraction](const ManifestEntry&, std::span<const curate::Record> records) {
    bool any = false;
    for (const auto& r : records) {
      if (!r.kept) continue;
      any = true;
      if (r.components_removed != 0 || r.foreground_fraction < min_fraction) return false;
    }
    return any;
  };
}

Selection select_high_quality(const DatasetManifest& manifest, const curate::Report& report,
                              const QualityCriteria& criteria) {
  static constexpr std::string_view kSuffix = "_curated";
  Selection sel;
  for (const auto& e : manifest.entries) {
    std::string id = case_id(e);
    if (id.ends_with(kSuffix)) id.resize(id.size() - kSuffix.size());
    std::vector<curate::Record> mine;
    for (const auto& r : report.records) {
      if (r.case_id == id) mine.push_back(r);
    }
    if (criteria(e, mine)) sel.manifest.entries.push_back(e);
  }
  sel.retained_fraction = manifest.entries.empty()
                              ? 1.0
                              : static_cast<double>(sel.manifest.entries.size()) / manifest.entries.size();
  std::clog << "select_high_quality: retained " << sel.manifest.entries.size() << " of " << manifest.entries.size()
            << " entries\n";
  return sel;
}

}  // namespace volseg::train
