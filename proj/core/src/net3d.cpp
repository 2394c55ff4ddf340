#include "volseg/net3d.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <random>

namespace volseg::net {

using ad::Tape;
using ad::Tensor;
using ad::Var;

void NetConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(Errc::config, what); };
  if (patch_input_size < 1 || token_patch_size < 1) fail("patch sizes must be positive");
  if (patch_input_size % token_patch_size != 0) fail("patch_input_size must be divisible by token_patch_size");
  if (embed_dim < 2 || embed_dim % 2 != 0) fail("embed_dim must be even");
  if (encoder_heads < 1 || embed_dim % encoder_heads != 0) fail("embed_dim must be divisible by encoder_heads");
  if (decoder_heads < 1 || embed_dim % decoder_heads != 0) fail("embed_dim must be divisible by decoder_heads");
  if (encoder_depth < 0 || decoder_depth < 0) fail("depths must be non-negative");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (mask_upsample_stages < 1) fail("mask_upsample_stages must be >= 1");
  if (!std::has_single_bit(static_cast<unsigned>(token_patch_size))) fail("token_patch_size must be a power of two");
  if (std::countr_zero(static_cast<unsigned>(token_patch_size)) < mask_upsample_stages) {
    fail("token_patch_size too small for the number of upsample stages");
  }
}

std::vector<int> NetConfig::upsample_strides() const {
  const int exponent = std::countr_zero(static_cast<unsigned>(token_patch_size));
  std::vector<int> strides;
  for (int i = 0; i < mask_upsample_stages; ++i) {
    const int e = exponent / mask_upsample_stages + (i < exponent % mask_upsample_stages ? 1 : 0);
    strides.push_back(1 << e);
  }
  return strides;
}

std::vector<int> NetConfig::upsample_channels() const {
  std::vector<int> ch;
  for (int i = 0; i < mask_upsample_stages; ++i) ch.push_back(std::max(1, embed_dim >> (i + 2)));
  return ch;
}

NetConfig NetConfig::reference() { return {}; }

NetConfig NetConfig::test() {
  NetConfig c;
  c.patch_input_size = 32;
  c.token_patch_size = 8;
  c.embed_dim = 32;
  c.encoder_depth = 2;
  c.encoder_heads = 4;
  c.decoder_depth = 2;
  c.decoder_heads = 4;
  return c;
}

NetConfig NetConfig::tiny() {
  NetConfig c;
  c.patch_input_size = 16;
  c.token_patch_size = 4;
  c.embed_dim = 8;
  c.encoder_depth = 1;
  c.encoder_heads = 2;
  c.decoder_depth = 1;
  c.decoder_heads = 2;
  c.mlp_ratio = 2;
  return c;
}

NetConfig NetConfig::desk() {
  NetConfig c;
  c.patch_input_size = 64;
  c.token_patch_size = 16;
  c.embed_dim = 128;
  c.encoder_depth = 2;
  c.encoder_heads = 4;
  c.decoder_depth = 2;
  c.decoder_heads = 4;
  return c;
}

void to_json(nlohmann::json& j, const NetConfig& c) {
  j = nlohmann::json{{"patch_input_size", c.patch_input_size}, {"token_patch_size", c.token_patch_size},
                     {"embed_dim", c.embed_dim},               {"encoder_depth", c.encoder_depth},
                     {"encoder_heads", c.encoder_heads},       {"decoder_depth", c.decoder_depth},
                     {"decoder_heads", c.decoder_heads},       {"mask_upsample_stages", c.mask_upsample_stages},
                     {"mlp_ratio", c.mlp_ratio},               {"fourier_scale", c.fourier_scale}};
}

void from_json(const nlohmann::json& j, NetConfig& c) {
  NetConfig d;
  c.patch_input_size = j.value("patch_input_size", d.patch_input_size);
  c.token_patch_size = j.value("token_patch_size", d.token_patch_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.encoder_depth = j.value("encoder_depth", d.encoder_depth);
  c.encoder_heads = j.value("encoder_heads", d.encoder_heads);
  c.decoder_depth = j.value("decoder_depth", d.decoder_depth);
  c.decoder_heads = j.value("decoder_heads", d.decoder_heads);
  c.mask_upsample_stages = j.value("mask_upsample_stages", d.mask_upsample_stages);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.fourier_scale = j.value("fourier_scale", d.fourier_scale);
}

// ---------------------------------------------------------------------------
// Parameter layout

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(int rows, int cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t(rows, cols);
    for (auto& v : t.data) v = dist(rng_);
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

struct Layout {
  const NetConfig& cfg;
  Initializer& init;
  std::vector<Parameter>& out;

  void add(std::string name, Tensor value, bool trainable = true) {
    out.push_back({std::move(name), std::move(value), Tensor(), trainable});
  }
  void linear(const std::string& name, int in, int outd) {
    add(name + ".weight", init.normal(in, outd, 1.0 / std::sqrt(static_cast<double>(in))));
    add(name + ".bias", Tensor(1, outd, 0.0));
  }
  void norm(const std::string& name, int width) {
    add(name + ".gamma", Tensor(1, width, 1.0));
    add(name + ".beta", Tensor(1, width, 0.0));
  }
  void attention(const std::string& name, int width) {
    for (const char* p : {".q", ".k", ".v", ".o"}) linear(name + p, width, width);
  }
  void mlp(const std::string& name, int width) {
    linear(name + ".fc1", width, width * cfg.mlp_ratio);
    linear(name + ".fc2", width * cfg.mlp_ratio, width);
  }
};

std::vector<Parameter> build_parameters(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<Parameter> params;
  Initializer init(seed);
  Layout L{cfg, init, params};
  const int d = cfg.embed_dim;
  const int t3 = cfg.token_patch_size * cfg.token_patch_size * cfg.token_patch_size;

  L.linear("encoder.patch_embed", t3, d);
  L.add("encoder.pos_embed", init.normal(cfg.tokens(), d, 0.02));
  for (int b = 0; b < cfg.encoder_depth; ++b) {
    const std::string p = "encoder.blocks." + std::to_string(b);
    L.norm(p + ".ln1", d);
    L.attention(p + ".attn", d);
    L.norm(p + ".ln2", d);
    L.mlp(p + ".mlp", d);
  }
  L.linear("encoder.neck", d, d);
  L.norm("encoder.neck_ln", d);

  L.add("prompt.fourier_gaussian", init.normal(3, d / 2, cfg.fourier_scale), false);
  L.add("prompt.label_embed", init.normal(3, d, 1.0));

  L.add("decoder.output_token", init.normal(1, d, 1.0));
  for (int l = 0; l < cfg.decoder_depth; ++l) {
    const std::string p = "decoder.layers." + std::to_string(l);
    L.attention(p + ".self_attn", d);
    L.norm(p + ".ln1", d);
    L.attention(p + ".cross_t2i", d);
    L.norm(p + ".ln2", d);
    L.mlp(p + ".mlp", d);
    L.norm(p + ".ln3", d);
    L.attention(p + ".cross_i2t", d);
    L.norm(p + ".ln4", d);
  }
  L.attention("decoder.final_attn", d);
  L.norm("decoder.final_ln", d);

  const auto strides = cfg.upsample_strides();
  const auto channels = cfg.upsample_channels();
  int in_ch = d;
  for (std::size_t i = 0; i < strides.size(); ++i) {
    const int s3 = strides[i] * strides[i] * strides[i];
    const std::string p = "decoder.upscale." + std::to_string(i);
    L.add(p + ".weight", init.normal(in_ch, s3 * channels[i], 1.0 / std::sqrt(static_cast<double>(in_ch))));
    L.add(p + ".bias", Tensor(1, channels[i], 0.0));
    if (i + 1 < strides.size()) L.norm(p + ".ln", channels[i]);
    in_ch = channels[i];
  }
  L.add("decoder.skip.weight", init.normal(1, in_ch, 1.0));
  L.linear("decoder.hyper.fc0", d, d);
  L.linear("decoder.hyper.fc1", d, d);
  L.linear("decoder.hyper.fc2", d, in_ch);
  L.add("decoder.mask_bias", Tensor(1, 1, 0.0));
  return params;
}

}  // namespace

ModelState ModelState::create(const NetConfig& cfg, std::uint64_t seed) {
  ModelState s;
  s.cfg_ = cfg;
  s.seed_ = seed;
  s.params_ = build_parameters(cfg, seed);
  s.reindex();
  return s;
}

ModelState ModelState::from_parameters(const NetConfig& cfg, std::uint64_t seed, std::vector<Parameter> params) {
  ModelState s = create(cfg, seed);
  if (params.size() != s.params_.size()) throw Error(Errc::config, "parameter count does not match config");
  for (auto& p : params) {
    auto& dst = s.param(p.name);
    if (!dst.value.same_shape(p.value)) throw Error(Errc::shape, "parameter " + p.name + " has wrong shape");
    dst.value = std::move(p.value);
  }
  return s;
}

void ModelState::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
}

Parameter& ModelState::param(std::string_view name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw Error(Errc::not_found, "no parameter " + std::string(name));
  return params_[it->second];
}

const Parameter& ModelState::param(std::string_view name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw Error(Errc::not_found, "no parameter " + std::string(name));
  return params_[it->second];
}

bool ModelState::has(std::string_view name) const { return index_.find(name) != index_.end(); }

void ModelState::zero_grad() {
  for (auto& p : params_) p.grad = Tensor(p.value.rows, p.value.cols, 0.0);
}

bool ModelState::all_finite() const {
  for (const auto& p : params_) {
    for (double v : p.value.data) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

// ---------------------------------------------------------------------------
// Forward graph

Vec3d normalize_patch_coord(const Vec3i& local, int patch_size) {
  Vec3d c{};
  for (int a = 0; a < 3; ++a) c[a] = 2.0 * (local[a] + 0.5) / patch_size - 1.0;
  return c;
}

Tensor positional_encoding(const ModelState& state, std::span<const Vec3d> normalized) {
  const Tensor& g = state.param("prompt.fourier_gaussian").value;
  const int half = g.cols;
  Tensor out(static_cast<int>(normalized.size()), 2 * half);
  for (std::size_t r = 0; r < normalized.size(); ++r) {
    for (int j = 0; j < half; ++j) {
      double proj = 0.0;
      for (int a = 0; a < 3; ++a) proj += normalized[r][a] * g(a, j);
      proj *= 2.0 * std::numbers::pi;
      out(static_cast<int>(r), j) = std::sin(proj);
      out(static_cast<int>(r), half + j) = std::cos(proj);
    }
  }
  return out;
}

Tensor patch_column(const Volume& patch, int patch_size) {
  if (patch.dims != Vec3i{patch_size, patch_size, patch_size}) {
    throw Error(Errc::shape, "patch must be " + std::to_string(patch_size) + "^3");
  }
  Tensor col(static_cast<int>(patch.size()), 1);
  for (std::size_t i = 0; i < patch.size(); ++i) col.data[i] = patch.data[i];
  return col;
}

namespace {

/// Binds parameters to tape leaves, once per tape.
class Binder {
 public:
  Binder(Tape& tape, const ModelState& state, ModelState* grads) : tape_(tape), state_(state), grads_(grads) {}

  Var operator()(const std::string& name) {
    if (auto it = cache_.find(name); it != cache_.end()) return it->second;
    const Parameter& p = state_.param(name);
    Tensor* sink = nullptr;
    if (grads_ != nullptr && p.trainable) {
      Parameter& mp = grads_->param(name);
      if (!mp.grad.same_shape(mp.value)) mp.grad = Tensor(mp.value.rows, mp.value.cols, 0.0);
      sink = &mp.grad;
    }
    Var v = tape_.parameter(p.value, sink);
    cache_.emplace(name, v);
    return v;
  }

  Tape& tape() { return tape_; }
  const ModelState& state() const { return state_; }
  const NetConfig& cfg() const { return state_.config(); }

 private:
  Tape& tape_;
  const ModelState& state_;
  ModelState* grads_;
  std::map<std::string, Var> cache_;
};

Var lin(Binder& P, const std::string& name, Var x) {
  return ad::linear(x, P(name + ".weight"), P(name + ".bias"));
}

Var norm(Binder& P, const std::string& name, Var x) {
  return ad::layer_norm(x, P(name + ".gamma"), P(name + ".beta"));
}

Var attend(Binder& P, const std::string& name, Var q, Var k, Var v, int heads) {
  return lin(P, name + ".o",
             ad::attention(lin(P, name + ".q", q), lin(P, name + ".k", k), lin(P, name + ".v", v), heads));
}

Var mlp(Binder& P, const std::string& name, Var x) {
  return lin(P, name + ".fc2", ad::gelu(lin(P, name + ".fc1", x)));
}

// [tokens x t^3] gather of non-overlapping token patches.
Tensor im2col(const Tensor& patch, int patch_size, int token) {
  const int g = patch_size / token;
  const int t3 = token * token * token;
  Tensor cols(g * g * g, t3);
  int row = 0;
  for (int tz = 0; tz < g; ++tz) {
    for (int ty = 0; ty < g; ++ty) {
      for (int tx = 0; tx < g; ++tx, ++row) {
        double* dst = &cols.data[static_cast<std::size_t>(row) * t3];
        for (int oz = 0; oz < token; ++oz) {
          for (int oy = 0; oy < token; ++oy) {
            const std::size_t src = static_cast<std::size_t>(tx * token) +
                                    static_cast<std::size_t>(patch_size) *
                                        (static_cast<std::size_t>(ty * token + oy) +
                                         static_cast<std::size_t>(patch_size) * (tz * token + oz));
            std::copy(&patch.data[src], &patch.data[src] + token, dst);
            dst += token;
          }
        }
      }
    }
  }
  return cols;
}

Tensor dense_pe(const ModelState& state) {
  const int g = state.config().grid();
  std::vector<Vec3d> centers;
  centers.reserve(static_cast<std::size_t>(g) * g * g);
  for (int z = 0; z < g; ++z) {
    for (int y = 0; y < g; ++y) {
      for (int x = 0; x < g; ++x) centers.push_back(normalize_patch_coord({x, y, z}, g));
    }
  }
  return positional_encoding(state, centers);
}

Var encode_image_graph(Binder& P, const Tensor& patch) {
  const auto& c = P.cfg();
  if (patch.rows != c.patch_input_size * c.patch_input_size * c.patch_input_size || patch.cols != 1) {
    throw Error(Errc::shape, "patch column has wrong size");
  }
  Var cols = P.tape().constant(im2col(patch, c.patch_input_size, c.token_patch_size));
  Var x = ad::add(lin(P, "encoder.patch_embed", cols), P("encoder.pos_embed"));
  for (int b = 0; b < c.encoder_depth; ++b) {
    const std::string p = "encoder.blocks." + std::to_string(b);
    Var h = norm(P, p + ".ln1", x);
    x = ad::add(x, attend(P, p + ".attn", h, h, h, c.encoder_heads));
    x = ad::add(x, mlp(P, p + ".mlp", norm(P, p + ".ln2", x)));
  }
  return norm(P, "encoder.neck_ln", lin(P, "encoder.neck", x));
}

Tensor prompt_pe(const ModelState& state, std::span<const PointPrompt> local_points) {
  const int p = state.config().patch_input_size;
  std::vector<Vec3d> coords;
  for (const auto& pt : local_points) {
    if (!in_bounds({p, p, p}, pt.coord)) throw Error(Errc::out_of_patch, "prompt point outside the patch");
    coords.push_back(normalize_patch_coord(pt.coord, p));
  }
  return positional_encoding(state, coords);
}

Var encode_prompts_graph(Binder& P, std::span<const PointPrompt> local_points) {
  const Tensor pe = prompt_pe(P.state(), local_points);
  std::vector<int> labels;
  for (const auto& pt : local_points) labels.push_back(pt.positive() ? 1 : 0);
  labels.push_back(2);  // padding token
  Var emb = ad::gather_rows(P("prompt.label_embed"), labels);
  Tensor pe_padded(static_cast<int>(labels.size()), P.cfg().embed_dim, 0.0);
  std::copy(pe.data.begin(), pe.data.end(), pe_padded.data.begin());
  return ad::add(emb, P.tape().constant(std::move(pe_padded)));
}

Var decode_graph(Binder& P, Var image_tokens, const Tensor& detail, Var prompt_tokens) {
  const auto& c = P.cfg();
  Tape& tape = P.tape();
  if (image_tokens.value().rows != c.tokens() || image_tokens.value().cols != c.embed_dim ||
      prompt_tokens.value().cols != c.embed_dim ||
      detail.rows != c.patch_input_size * c.patch_input_size * c.patch_input_size) {
    throw Error(Errc::shape, "embedding does not match the model config");
  }
  const std::array<Var, 2> token_parts{P("decoder.output_token"), prompt_tokens};
  Var query_pe = ad::concat_rows(token_parts);
  Var queries = query_pe;
  Var keys = image_tokens;
  Var key_pe = tape.constant(dense_pe(P.state()));
  const int h = c.decoder_heads;

  for (int l = 0; l < c.decoder_depth; ++l) {
    const std::string p = "decoder.layers." + std::to_string(l);
    if (l == 0) {
      queries = attend(P, p + ".self_attn", queries, queries, queries, h);
    } else {
      Var q = ad::add(queries, query_pe);
      queries = ad::add(queries, attend(P, p + ".self_attn", q, q, queries, h));
    }
    queries = norm(P, p + ".ln1", queries);
    Var q = ad::add(queries, query_pe);
    Var k = ad::add(keys, key_pe);
    queries = norm(P, p + ".ln2", ad::add(queries, attend(P, p + ".cross_t2i", q, k, keys, h)));
    queries = norm(P, p + ".ln3", ad::add(queries, mlp(P, p + ".mlp", queries)));
    q = ad::add(queries, query_pe);
    k = ad::add(keys, key_pe);
    keys = norm(P, p + ".ln4", ad::add(keys, attend(P, p + ".cross_i2t", k, q, queries, h)));
  }
  {
    Var q = ad::add(queries, query_pe);
    Var k = ad::add(keys, key_pe);
    queries = norm(P, "decoder.final_ln", ad::add(queries, attend(P, "decoder.final_attn", q, k, keys, h)));
  }

  const auto strides = c.upsample_strides();
  const auto channels = c.upsample_channels();
  Var x = keys;
  int grid = c.grid();
  for (std::size_t i = 0; i < strides.size(); ++i) {
    const std::string p = "decoder.upscale." + std::to_string(i);
    x = ad::upsample_shuffle(ad::matmul(x, P(p + ".weight")), grid, strides[i], channels[i]);
    x = ad::add_row(x, P(p + ".bias"));
    grid *= strides[i];
    if (i + 1 < strides.size()) {
      x = ad::gelu(norm(P, p + ".ln", x));
    } else {
      x = ad::gelu(ad::add(x, ad::matmul(tape.constant(detail), P("decoder.skip.weight"))));
    }
  }

  Var out_token = ad::slice_rows(queries, 0, 1);
  Var hyper = ad::gelu(lin(P, "decoder.hyper.fc0", out_token));
  hyper = ad::gelu(lin(P, "decoder.hyper.fc1", hyper));
  hyper = lin(P, "decoder.hyper.fc2", hyper);
  return ad::add_row(ad::matmul(x, hyper, true), P("decoder.mask_bias"));
}

Grid<double> to_grid(const Tensor& column, int patch_size) {
  Grid<double> g({patch_size, patch_size, patch_size});
  std::copy(column.data.begin(), column.data.end(), g.data.begin());
  return g;
}

}  // namespace

ImageEmbedding encode_image(const Volume& patch, const ModelState& state) {
  const auto& c = state.config();
  Tensor col = patch_column(patch, c.patch_input_size);
  Tape tape(false);
  Binder P(tape, state, nullptr);
  Var tokens = encode_image_graph(P, col);
  return {c.grid(), tokens.value(), std::move(col)};
}

PromptEmbedding encode_prompts(std::span<const PointPrompt> points, const Vec3i& patch_origin,
                               const ModelState& state) {
  std::vector<PointPrompt> local(points.begin(), points.end());
  for (auto& p : local) {
    for (int a = 0; a < 3; ++a) p.coord[a] -= patch_origin[a];
  }
  Tape tape(false);
  Binder P(tape, state, nullptr);
  Var v = encode_prompts_graph(P, local);
  return {v.value(), static_cast<int>(points.size())};
}

Grid<double> decode_mask(const ImageEmbedding& img, const PromptEmbedding& prompts, const ModelState& state) {
  if (img.grid != state.config().grid()) throw Error(Errc::shape, "image embedding grid does not match config");
  Tape tape(false);
  Binder P(tape, state, nullptr);
  Var logits = decode_graph(P, tape.constant(img.tokens), img.detail, tape.constant(prompts.vectors));
  return to_grid(logits.value(), state.config().patch_input_size);
}

Grid<double> forward(const Volume& patch, std::span<const PointPrompt> points, const ModelState& state) {
  const auto& c = state.config();
  Tensor col = patch_column(patch, c.patch_input_size);
  Tape tape(false);
  Binder P(tape, state, nullptr);
  Var logits = decode_graph(P, encode_image_graph(P, col), col, encode_prompts_graph(P, points));
  Var probs = ad::sigmoid(logits);
  return to_grid(probs.value(), c.patch_input_size);
}

Var forward_logits(Tape& tape, const Tensor& patch, std::span<const PointPrompt> local_points, ModelState& state) {
  Binder P(tape, state, tape.recording() ? &state : nullptr);
  return decode_graph(P, encode_image_graph(P, patch), patch, encode_prompts_graph(P, local_points));
}

}  // namespace volseg::net
