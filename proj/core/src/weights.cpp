// Weight archive layout (all integers little-endian):
//   char[8]  magic "VSEGWTS1"
//   u32      format version
//   u32      header length, then that many bytes of UTF-8 JSON:
//            {"kind": "full"|"encoder", "seed": u64, "config": {NetConfig fields}}
//   u32      tensor count
//   per tensor: u32 name length, name bytes, u32 ndim, u64 dims[ndim], f64 values (row-major)
#include <bit>
#include <cstring>
#include <fstream>

#include "volseg/net3d.hpp"

namespace volseg::net {
namespace {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

constexpr char kMagic[8] = {'V', 'S', 'E', 'G', 'W', 'T', 'S', '1'};
constexpr std::string_view kEncoderPrefix = "encoder.";

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error(Errc::parse, "truncated weight archive");
  return v;
}

void write_archive(const std::filesystem::path& path, const ModelState& state, bool encoder_only) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kArchiveVersion);
  const nlohmann::json header{
      {"kind", encoder_only ? "encoder" : "full"}, {"seed", state.seed()}, {"config", state.config()}};
  const std::string h = header.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(h.size()));
  out.write(h.data(), static_cast<std::streamsize>(h.size()));

  std::vector<const Parameter*> chosen;
  for (const auto& p : state.params()) {
    if (!encoder_only || p.name.starts_with(kEncoderPrefix)) chosen.push_back(&p);
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(chosen.size()));
  for (const auto* p : chosen) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::uint32_t>(out, 2);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(p->value.rows));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(p->value.cols));
    out.write(reinterpret_cast<const char*>(p->value.data.data()),
              static_cast<std::streamsize>(p->value.data.size() * sizeof(double)));
  }
  if (!out) throw Error(Errc::io, "short write to " + path.string());
}

struct Archive {
  std::string kind;
  std::uint64_t seed = 0;
  NetConfig config;
  std::vector<Parameter> params;
};

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw Error(Errc::parse, "not a weight archive");
  const auto version = get<std::uint32_t>(in);
  if (version != kArchiveVersion) {
    throw Error(Errc::version, "unsupported archive version " + std::to_string(version));
  }
  const auto hlen = get<std::uint32_t>(in);
  std::string h(hlen, '\0');
  in.read(h.data(), hlen);
  if (!in) throw Error(Errc::parse, "truncated archive header");
  Archive a;
  try {
    const auto header = nlohmann::json::parse(h);
    a.kind = header.at("kind").get<std::string>();
    a.seed = header.at("seed").get<std::uint64_t>();
    a.config = header.at("config").get<NetConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse, std::string("archive header: ") + e.what());
  }
  const auto count = get<std::uint32_t>(in);
  for (std::uint32_t t = 0; t < count; ++t) {
    Parameter p;
    p.name.resize(get<std::uint32_t>(in));
    in.read(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const auto ndim = get<std::uint32_t>(in);
    if (ndim != 2) throw Error(Errc::parse, "tensor " + p.name + " is not 2D");
    const auto rows = get<std::uint64_t>(in);
    const auto cols = get<std::uint64_t>(in);
    p.value = ad::Tensor(static_cast<int>(rows), static_cast<int>(cols));
    in.read(reinterpret_cast<char*>(p.value.data.data()),
            static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
    if (!in) throw Error(Errc::parse, "truncated tensor " + p.name);
    a.params.push_back(std::move(p));
  }
  return a;
}

}  // namespace

void save_state(const std::filesystem::path& path, const ModelState& state) { write_archive(path, state, false); }

ModelState load_state(const std::filesystem::path& path) {
  auto a = read_archive(path);
  if (a.kind != "full") throw Error(Errc::parse, "archive is not a full model state");
  return ModelState::from_parameters(a.config, a.seed, std::move(a.params));
}

void export_encoder(const ModelState& state, const std::filesystem::path& path) { write_archive(path, state, true); }

void import_encoder(const std::filesystem::path& path, ModelState& state) {
  auto a = read_archive(path);
  if (a.kind != "encoder") throw Error(Errc::parse, "archive is not an encoder export");
  if (!(a.config == state.config())) throw Error(Errc::config, "encoder config does not match model config");
  for (auto& p : a.params) {
    if (!p.name.starts_with(kEncoderPrefix)) throw Error(Errc::parse, "non-encoder tensor " + p.name);
    auto& dst = state.param(p.name);
    if (!dst.value.same_shape(p.value)) throw Error(Errc::shape, "tensor " + p.name + " has wrong shape");
    dst.value = std::move(p.value);
  }
}

}  // namespace volseg::net
