#pragma once

#include <array>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "flatec/entropy.hpp"
#include "flatec/error.hpp"
#include "flatec/geometry.hpp"
#include "flatec/nn/checkpoint.hpp"
#include "flatec/refinement.hpp"
#include "flatec/spectral_codec.hpp"
#include "flatec/triplane.hpp"

namespace flatec {

/// Architecture hyperparameters. Everything the decoder needs to rebuild the
/// network; serialized as one `key=value` line whose FNV-1a hash ties
/// checkpoints and bitstreams together.
struct ModelConfig {
  std::array<int, 3> dims{64, 64, 64};  // padded grid
  int stages = 3;                       // S
  int group = 4;                        // N_g
  int c1 = 16;                          // volume channels
  int c2 = 20;                          // basic plane dim (stage 0)
  int lsar_blocks = 4;
  int pe_frequencies = 8;
  double dropout = 0.1;
  int uplift_hidden = 32;

  int pad_multiple() const { return (1 << stages) * group; }

  /// channels[s] = c2 * 2^s for s = 0..S.
  std::vector<int> channels() const {
    std::vector<int> c;
    for (int s = 0; s <= stages; ++s) c.push_back(c2 << s);
    return c;
  }

  int latent_channels() const { return c2 << stages; }

  std::array<int, 2> latent_shape(int plane) const {
    const auto pd = plane_dims(dims, plane);
    return {pd[0] >> stages, pd[1] >> stages};
  }

  std::string line() const {
    std::ostringstream os;
    os << "dims=" << dims[0] << "x" << dims[1] << "x" << dims[2] << " stages=" << stages << " group=" << group
       << " c1=" << c1 << " c2=" << c2 << " lsar=" << lsar_blocks << " pe=" << pe_frequencies
       << " dropout=" << dropout << " uplift_hidden=" << uplift_hidden;
    return os.str();
  }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : line()) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  void validate() const {
    auto bad = [&](const std::string& why) { throw ModelError("model config: " + why + " (" + line() + ")"); };
    if (stages < 0 || stages > 6) bad("stages outside [0, 6]");
    if (group < 1 || c1 < 1 || c2 < 1 || lsar_blocks < 0 || pe_frequencies < 0 || uplift_hidden < 1)
      bad("non-positive size");
    if (!(dropout >= 0.0 && dropout < 1.0)) bad("dropout outside [0, 1)");
    for (int d : dims)
      if (d < 1 || d % pad_multiple() != 0 || d > 65535) bad("dims must be multiples of 2^S * N_g");
    if (lsar_blocks > 0) lsa_window(dims);
  }

  static ModelConfig parse(const std::string& text) {
    ModelConfig c;
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw ModelError("model config: malformed token '" + tok + "'");
      const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
      try {
        if (key == "dims") {
          char x1 = 0, x2 = 0;
          std::istringstream vs(val);
          if (!(vs >> c.dims[0] >> x1 >> c.dims[1] >> x2 >> c.dims[2]) || x1 != 'x' || x2 != 'x')
            throw ModelError("model config: bad dims '" + val + "'");
        } else if (key == "stages") {
          c.stages = std::stoi(val);
        } else if (key == "group") {
          c.group = std::stoi(val);
        } else if (key == "c1") {
          c.c1 = std::stoi(val);
        } else if (key == "c2") {
          c.c2 = std::stoi(val);
        } else if (key == "lsar") {
          c.lsar_blocks = std::stoi(val);
        } else if (key == "pe") {
          c.pe_frequencies = std::stoi(val);
        } else if (key == "dropout") {
          c.dropout = std::stod(val);
        } else if (key == "uplift_hidden") {
          c.uplift_hidden = std::stoi(val);
        } else {
          throw ModelError("model config: unknown key '" + key + "'");
        }
      } catch (const std::logic_error&) {
        throw ModelError("model config: bad value for '" + key + "'");
      }
    }
    c.validate();
    return c;
  }
};

/// Named configurations. The three resolution rows use the full module set
/// (4 LSAR blocks, PE) with their basic dims; "desk" is a small single-core setup.
inline ModelConfig model_preset(const std::string& name) {
  ModelConfig c;
  auto padded = [&](std::array<int, 3> d) { return pad_dims(d, c.pad_multiple()); };
  if (name == "448x448x56") {
    c.c2 = 20;
    c.dims = padded({448, 448, 56});
  } else if (name == "384x384x48") {
    c.c2 = 32;
    c.dims = padded({384, 384, 48});
  } else if (name == "320x320x40") {
    c.c2 = 40;
    c.dims = padded({320, 320, 40});
  } else if (name == "desk") {
    c.stages = 2;
    c.c1 = 8;
    c.c2 = 8;
    c.lsar_blocks = 2;
    c.pe_frequencies = 4;
    c.dims = {64, 64, 64};
  } else if (name == "desk32") {
    c.stages = 2;
    c.c1 = 8;
    c.c2 = 8;
    c.lsar_blocks = 2;
    c.pe_frequencies = 4;
    c.dims = {32, 32, 32};
  } else {
    throw ModelError("unknown model preset '" + name + "'");
  }
  c.validate();
  return c;
}

inline const std::vector<std::string>& model_preset_names() {
  static const std::vector<std::string> names{"448x448x56", "384x384x48", "320x320x40", "desk", "desk32"};
  return names;
}

template <class T>
struct Model {
  ModelConfig config;
  ParameterStore<T> store;
  VoxelEmbedder<T> embedder;
  PlaneProjector<T> projector;
  TriplaneEncoder<T> encoder;
  FactorizedDensity<T> content_density, highfreq_density;
  TriplaneDecoder<T> decoder;
  BackProjector<T> back_projector;
  PositionalFusion<T> fusion;
  std::vector<LsaBlock<T>> lsar;
  OccupancyHead<T> head;
  Uplifter<T> uplifter;

  explicit Model(const ModelConfig& cfg, std::uint64_t seed = 1) : config(cfg) {
    config.validate();
    Rng rng(seed);
    const auto ch = config.channels();
    const int cs = config.latent_channels();
    embedder = VoxelEmbedder<T>::create(store, "embed", config.c1, rng);
    projector = PlaneProjector<T>::create(store, "project", config.dims, config.group, config.c1, config.c2, rng);
    encoder = TriplaneEncoder<T>::create(store, "enc", ch, config.dropout, rng);
    content_density = FactorizedDensity<T>::create(store, "density.content", 3 * cs, rng);
    highfreq_density = FactorizedDensity<T>::create(store, "density.highfreq", 3 * cs, rng);
    decoder = TriplaneDecoder<T>::create(store, "dec", ch, rng);
    back_projector = BackProjector<T>::create(store, "backproject", config.dims, config.group, config.c1, config.c2, rng);
    fusion = PositionalFusion<T>::create(store, "fusion", config.c1, config.pe_frequencies, rng);
    if (config.lsar_blocks > 0) {
      const int w = lsa_window(config.dims);
      for (int b = 0; b < config.lsar_blocks; ++b)
        lsar.push_back(LsaBlock<T>::create(store, "lsar" + std::to_string(b), w, config.c1, rng));
    }
    head = OccupancyHead<T>::create(store, "occupancy", config.c1, rng);
    uplifter = Uplifter<T>::create(store, "uplift", config.c1, config.uplift_hidden, rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  std::string checkpoint_bytes() const { return nn::serialize_checkpoint(config.line(), config.hash(), store); }

  void save(const std::string& path) const { nn::save_checkpoint(path, config.line(), config.hash(), store); }

  /// Parameters whose ids start with `prefix`.
  std::vector<Var<T>> parameters(const std::string& prefix = "") const {
    std::vector<Var<T>> v;
    for (const auto& p : store.all())
      if (p.id.rfind(prefix, 0) == 0) v.push_back(p.var);
    return v;
  }
};

/// Rebuilds a model from a checkpoint, checking the config hash.
template <class T>
std::unique_ptr<Model<T>> model_from_checkpoint(const nn::Checkpoint& ck) {
  const auto cfg = ModelConfig::parse(ck.config);
  if (cfg.hash() != ck.config_hash)
    throw ModelError("checkpoint config hash mismatch for '" + ck.config + "'");
  auto m = std::make_unique<Model<T>>(cfg);
  nn::apply_checkpoint(ck, m->store);
  return m;
}

template <class T>
std::unique_ptr<Model<T>> load_model(const std::string& path) {
  return model_from_checkpoint<T>(nn::load_checkpoint(path));
}

/// Occupancy -> per-plane (content, highfreq) latents before quantization.
template <class T>
std::array<PlaneLatents<T>, 3> analysis(Graph<T>& g, const Model<T>& m, const VoxelGrid& grid) {
  if (grid.dims != m.config.dims)
    throw DataError("grid dims " + std::to_string(grid.dims[0]) + "x" + std::to_string(grid.dims[1]) + "x" +
                    std::to_string(grid.dims[2]) + " do not match model dims");
  auto fv = embed_voxels(g, grid, m.embedder);
  return encode_triplane(g, project_triplane(g, fv, m.projector), m.encoder);
}

/// Refined volume features [H, W, D, C1] from (quantized) latents.
template <class T>
Var<T> synthesis(Graph<T>& g, const Model<T>& m, const std::array<PlaneLatents<T>, 3>& latents) {
  auto planes = decode_triplane(g, latents, m.decoder);
  auto fv = fuse_positional(g, back_project(g, planes, m.back_projector), m.fusion);
  return lsa_refine(g, fv, m.lsar);
}

template <class T>
QuantizedStream quantize_stream(const Model<T>& m, const std::array<PlaneLatents<T>, 3>& latents, bool highfreq) {
  QuantizedStream s;
  s.channels = m.config.latent_channels();
  for (int p = 0; p < 3; ++p) {
    const auto& v = highfreq ? latents[p].highfreq : latents[p].content;
    s.shapes[p] = {v->value.dim(0), v->value.dim(1)};
    s.planes[p] = quantize_eval(v->value);
  }
  return s;
}

inline QuantizedStream stream_geometry(const ModelConfig& cfg) {
  QuantizedStream s;
  s.channels = cfg.latent_channels();
  for (int p = 0; p < 3; ++p) s.shapes[p] = cfg.latent_shape(p);
  return s;
}

template <class T>
std::array<PlaneLatents<T>, 3> dequantize_streams(const QuantizedStream& content, const QuantizedStream& highfreq) {
  std::array<PlaneLatents<T>, 3> out;
  for (int p = 0; p < 3; ++p) {
    const nn::Shape shape{content.shapes[p][0], content.shapes[p][1], content.channels};
    out[p].content = nn::constant(dequantize<T>(content.planes[p], shape));
    out[p].highfreq = nn::constant(dequantize<T>(highfreq.planes[p], shape));
  }
  return out;
}

}  // namespace flatec
