#pragma once

#include <cstdint>
#include <string>

#include "flatec/entropy.hpp"
#include "flatec/error.hpp"
#include "flatec/geometry.hpp"
#include "flatec/model.hpp"
#include "flatec/refinement.hpp"

namespace flatec {

struct EncodeResult {
  Bitstream bitstream;
  QuantizedStream content, highfreq;
  double estimated_bits = 0.0;  // ideal code length of both substreams
};

/// Occupancy grid -> container. `point_count` is the size of the original scan.
template <class T>
EncodeResult encode_grid(const Model<T>& m, const VoxelGrid& grid, std::uint32_t point_count) {
  if (grid.occupied_count() == 0) throw DataError("encode: empty occupancy grid");
  Graph<T> g(false, false, 0);
  const auto latents = analysis(g, m, grid);
  EncodeResult r;
  r.content = quantize_stream(m, latents, false);
  r.highfreq = quantize_stream(m, latents, true);
  r.bitstream.content = ec_encode(r.content, build_cdf_tables(m.content_density));
  r.bitstream.highfreq = ec_encode(r.highfreq, build_cdf_tables(m.highfreq_density));
  r.estimated_bits = stream_rate_bits(r.content, m.content_density) + stream_rate_bits(r.highfreq, m.highfreq_density);
  auto& h = r.bitstream.header;
  h.config_hash = m.config.hash();
  h.voxel_size = static_cast<float>(grid.voxel_size);
  for (int a = 0; a < 3; ++a) {
    h.origin[a] = static_cast<float>(grid.origin[a]);
    h.dims[a] = static_cast<std::uint16_t>(grid.dims[a]);
  }
  h.stages = static_cast<std::uint8_t>(m.config.stages);
  h.group = static_cast<std::uint8_t>(m.config.group);
  h.content_channels = static_cast<std::uint16_t>(r.content.channels);
  h.hf_channels = static_cast<std::uint16_t>(r.highfreq.channels);
  for (int p = 0; p < 3; ++p)
    h.latent_shapes[p] = {static_cast<std::uint16_t>(r.content.shapes[p][0]),
                          static_cast<std::uint16_t>(r.content.shapes[p][1])};
  h.occupied_voxels = static_cast<std::uint32_t>(grid.occupied_count());
  h.point_count = point_count;
  return r;
}

struct DecodeOptions {
  BinarizeMode mode = BinarizeMode::top_k;
  double tau = 0.5;
  int uplift_rate = 0;  // 0: voxel centres
};

struct DecodeResult {
  VoxelGrid grid;
  PointCloud cloud;
  QuantizedStream content, highfreq;
};

/// Header fields the model must agree with; mismatches are model errors.
template <class T>
void check_header(const Model<T>& m, const BitstreamHeader& h) {
  const auto& c = m.config;
  if (h.config_hash != c.hash()) throw ModelError("bitstream config hash does not match checkpoint");
  for (int a = 0; a < 3; ++a)
    if (h.dims[a] != c.dims[a]) throw ModelError("bitstream dims do not match model");
  if (h.stages != c.stages || h.group != c.group || h.content_channels != c.latent_channels() ||
      h.hf_channels != c.latent_channels())
    throw ModelError("bitstream stage/channel layout does not match model");
  for (int p = 0; p < 3; ++p) {
    const auto s = c.latent_shape(p);
    if (h.latent_shapes[p][0] != s[0] || h.latent_shapes[p][1] != s[1])
      throw ModelError("bitstream latent shape does not match model");
  }
  if (!(h.voxel_size > 0.0f)) throw DataError("bitstream voxel size must be positive");
}

template <class T>
DecodeResult decode_bitstream(const Model<T>& m, const Bitstream& bs, const DecodeOptions& opt = {}) {
  const auto& h = bs.header;
  check_header(m, h);
  DecodeResult r;
  const auto geom = stream_geometry(m.config);
  r.content = ec_decode(bs.content, geom, build_cdf_tables(m.content_density), kBitstreamHeaderBytes);
  r.highfreq = ec_decode(bs.highfreq, geom, build_cdf_tables(m.highfreq_density),
                         kBitstreamHeaderBytes + bs.content.size());
  Graph<T> g(false, false, 0);
  auto features = synthesis(g, m, dequantize_streams<T>(r.content, r.highfreq));
  auto prob = occupancy_head(g, features, m.head);
  const Point3 origin{h.origin[0], h.origin[1], h.origin[2]};
  BinarizeOptions bo{opt.mode, opt.tau, h.occupied_voxels};
  if (opt.mode == BinarizeMode::top_k && (h.occupied_voxels == 0 || h.occupied_voxels > prob->size()))
    throw DataError("bitstream occupied-voxel count " + std::to_string(h.occupied_voxels) + " out of range");
  r.grid = binarize(prob->value, static_cast<double>(h.voxel_size), origin, bo);
  if (r.grid.occupied_count() == 0) {
    r.cloud = PointCloud{};
  } else if (opt.uplift_rate > 0) {
    r.cloud = to_point_cloud(uplift(g, r.grid, features, opt.uplift_rate, m.uplifter)->value);
  } else {
    r.cloud = devoxelize(r.grid);
  }
  return r;
}

template <class T>
struct Reconstruction {
  VoxelGrid grid;
  Var<T> features;
};

/// Encoder-side reconstruction: the grid and refined features a decoder would see.
template <class T>
Reconstruction<T> reconstruct(const Model<T>& m, const VoxelGrid& grid, const DecodeOptions& opt = {}) {
  Graph<T> g(false, false, 0);
  const auto latents = analysis(g, m, grid);
  auto features =
      synthesis(g, m, dequantize_streams<T>(quantize_stream(m, latents, false), quantize_stream(m, latents, true)));
  auto prob = occupancy_head(g, features, m.head);
  BinarizeOptions bo{opt.mode, opt.tau, grid.occupied_count()};
  return {binarize(prob->value, grid.voxel_size, grid.origin, bo), nn::constant(features->value)};
}

inline double bits_per_point(std::size_t bytes, std::uint32_t point_count) {
  if (point_count == 0) throw DataError("bits per point: zero point count");
  return 8.0 * static_cast<double>(bytes) / point_count;
}

}  // namespace flatec
