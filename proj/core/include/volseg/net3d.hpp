#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "volseg/autodiff.hpp"
#include "volseg/voxgrid.hpp"

namespace volseg::net {

struct NetConfig {
  int patch_input_size = 128;
  int token_patch_size = 16;
  int embed_dim = 384;
  int encoder_depth = 6;
  int encoder_heads = 6;
  int decoder_depth = 2;
  int decoder_heads = 8;
  int mask_upsample_stages = 2;
  int mlp_ratio = 4;
  double fourier_scale = 1.0;

  /// Throws Errc::config on inconsistent sizes.
  void validate() const;
  int grid() const { return patch_input_size / token_patch_size; }
  int tokens() const { return grid() * grid() * grid(); }
  /// Per-stage transposed-convolution strides; their product is token_patch_size.
  std::vector<int> upsample_strides() const;
  std::vector<int> upsample_channels() const;

  static NetConfig reference();
  /// patch 32, token 8, dim 32, depth 2.
  static NetConfig test();
  /// patch 16, token 4, dim 8; used for float64 gradient checks.
  static NetConfig tiny();
  /// patch 64, dim 128; the overfit experiment configuration.
  static NetConfig desk();

  bool operator==(const NetConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetConfig& c);
void from_json(const nlohmann::json& j, NetConfig& c);

struct Parameter {
  std::string name;
  ad::Tensor value;
  ad::Tensor grad;
  bool trainable = true;
};

/// All network weights plus the fixed Fourier frequency matrix.
class ModelState {
 public:
  ModelState() = default;
  static ModelState create(const NetConfig& cfg, std::uint64_t seed);
  /// Rebuilds a state from stored tensors; names and shapes must match create(cfg, seed).
  static ModelState from_parameters(const NetConfig& cfg, std::uint64_t seed, std::vector<Parameter> params);

  const NetConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  Parameter& param(std::string_view name);
  const Parameter& param(std::string_view name) const;
  bool has(std::string_view name) const;

  void zero_grad();
  bool all_finite() const;
  std::size_t parameter_count() const;

 private:
  void reindex();

  NetConfig cfg_;
  std::uint64_t seed_ = 0;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// Token grid of the image encoder plus the normalised patch used by the full-resolution skip.
struct ImageEmbedding {
  int grid = 0;
  ad::Tensor tokens;  // [grid^3 x embed_dim]
  ad::Tensor detail;  // [patch^3 x 1]
};

/// One row per prompt point in input order, followed by the padding token.
struct PromptEmbedding {
  ad::Tensor vectors;
  int points = 0;
};

/// Fourier features of coordinates normalised to [-1, 1]: [sin(2 pi c G), cos(2 pi c G)].
ad::Tensor positional_encoding(const ModelState& state, std::span<const Vec3d> normalized);
/// Voxel coordinate inside a patch mapped to [-1, 1] at voxel centres.
Vec3d normalize_patch_coord(const Vec3i& local, int patch_size);

/// Patch as a [p^3 x 1] column, x fastest. Throws Errc::shape unless dims are p^3.
ad::Tensor patch_column(const Volume& patch, int patch_size);

ImageEmbedding encode_image(const Volume& patch, const ModelState& state);
/// Points are in the volume frame; patch_origin maps patch-local (0,0,0) to the volume frame.
PromptEmbedding encode_prompts(std::span<const PointPrompt> points, const Vec3i& patch_origin,
                               const ModelState& state);
Grid<double> decode_mask(const ImageEmbedding& img, const PromptEmbedding& prompts, const ModelState& state);
/// Sigmoid probabilities; points are in patch-local coordinates.
Grid<double> forward(const Volume& patch, std::span<const PointPrompt> points, const ModelState& state);

/// Tape-level forward used by training and gradient checks. Returns [p^3 x 1] logits.
/// Gradients flow into state's Parameter::grad when the tape records.
ad::Var forward_logits(ad::Tape& tape, const ad::Tensor& patch, std::span<const PointPrompt> local_points,
                       ModelState& state);

// Weight archives: little-endian, shape-prefixed float64 tensors behind a JSON config header.
inline constexpr std::uint32_t kArchiveVersion = 1;

void save_state(const std::filesystem::path& path, const ModelState& state);
ModelState load_state(const std::filesystem::path& path);
/// Writes only the image-encoder parameters.
void export_encoder(const ModelState& state, const std::filesystem::path& path);
/// Replaces the encoder parameters of state with those in the archive; configs must match.
void import_encoder(const std::filesystem::path& path, ModelState& state);

}  // namespace volseg::net
