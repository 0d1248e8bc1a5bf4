#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flatec/codec.hpp"
#include "flatec/evaluation.hpp"
#include "flatec/runtime.hpp"
#include "flatec/synth.hpp"
#include "flatec/training.hpp"

using namespace flatec;
using json = nlohmann::ordered_json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kModel = 3 };

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

void emit(const json& j) { std::cout << j.dump() << std::endl; }

// NaN and infinity are not JSON numbers.
json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::array<int, 3> parse_dims(const std::string& s) {
  std::array<int, 3> d{};
  char x1 = 0, x2 = 0;
  std::istringstream is(s);
  if (!(is >> d[0] >> x1 >> d[1] >> x2 >> d[2]) || x1 != 'x' || x2 != 'x' || !is.eof())
    throw DataError("--dims: expected HxWxD, got '" + s + "'");
  return d;
}

Point3 parse_origin(const std::string& s) {
  Point3 o{};
  char c1 = 0, c2 = 0;
  std::istringstream is(s);
  if (!(is >> o[0] >> c1 >> o[1] >> c2 >> o[2]) || c1 != ',' || c2 != ',' || !is.eof())
    throw DataError("--origin: expected x,y,z, got '" + s + "'");
  return o;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

BinarizeMode parse_binarize(const std::string& s) { return s == "thresh" ? BinarizeMode::threshold : BinarizeMode::top_k; }

struct GridFlags {
  double voxel_size = 0.1;
  std::string dims, origin;

  void add(CLI::App* app) {
    app->add_option("--voxel-size", voxel_size, "Voxel edge length in metres")->capture_default_str()->check(
        CLI::PositiveNumber);
    app->add_option("--dims", dims, "Grid dims HxWxD; must match the model (default: model dims)");
    app->add_option("--origin", origin, "Grid origin x,y,z (default: axis-wise minimum of the scan)");
  }

  Voxelization apply(const PointCloud& cloud, const ModelConfig& cfg) const {
    if (!dims.empty() && parse_dims(dims) != cfg.dims)
      throw ModelError("--dims " + dims + " does not match the checkpoint's grid");
    const Point3 o = origin.empty() ? bounding_min(cloud) : parse_origin(origin);
    return voxelize(cloud, voxel_size, cfg.dims, o);
  }
};

int cmd_encode(const std::string& input, const std::string& ckpt, const std::string& output, const GridFlags& gf) {
  auto model = load_model<float>(ckpt);
  const auto cloud = load_scan(input);
  if (cloud.empty()) throw DataError("'" + input + "' holds no points");
  Stopwatch sw;
  const auto vox = gf.apply(cloud, model->config);
  const auto enc = encode_grid(*model, vox.grid, static_cast<std::uint32_t>(cloud.size()));
  const auto bytes = serialize_bitstream(enc.bitstream);
  const double secs = sw.seconds();
  detail::write_file(output, bytes);
  const auto file_bytes = std::filesystem::file_size(output);
  emit({{"command", "encode"},
        {"points", cloud.size()},
        {"dropped", vox.dropped},
        {"occupied", vox.grid.occupied_count()},
        {"bytes", file_bytes},
        {"bpp", bits_per_point(file_bytes, static_cast<std::uint32_t>(cloud.size()))},
        {"estimated_bits", enc.estimated_bits},
        {"encode_seconds", secs}});
  return kOk;
}

int cmd_decode(const std::string& input, const std::string& ckpt, const std::string& output, const std::string& bin,
               double tau, int rate, bool ascii) {
  auto model = load_model<float>(ckpt);
  const auto bytes = detail::read_file(input);
  Stopwatch sw;
  const auto dec = decode_bitstream(*model, parse_bitstream(bytes), {parse_binarize(bin), tau, rate});
  const double secs = sw.seconds();
  save_ply(output, dec.cloud, ascii);
  emit({{"command", "decode"},
        {"occupied", dec.grid.occupied_count()},
        {"points", dec.cloud.size()},
        {"bytes", bytes.size()},
        {"decode_seconds", secs}});
  return kOk;
}

struct TrainFlags {
  std::string config, output, synth_spec;
  std::vector<std::string> scans;
  int synth_count = 0;
  long steps = -1;
  double lambda = -1.0;
  long log_every = 50;
  bool ladder = false;
  GridFlags grid;
};

std::vector<PointCloud> training_clouds(const TrainFlags& f, const ModelConfig& cfg, double vs) {
  std::vector<PointCloud> clouds;
  for (const auto& s : f.scans) clouds.push_back(load_scan(s));
  if (f.synth_count > 0) {
    SceneSpec base;
    base.extent = {cfg.dims[0] * vs, cfg.dims[1] * vs, cfg.dims[2] * vs};
    base = parse_scene_spec(f.synth_spec, base);
    for (int i = 0; i < f.synth_count; ++i) {
      auto spec = base;
      spec.seed = base.seed + static_cast<std::uint64_t>(i);
      clouds.push_back(synth_scan(spec));
    }
  }
  if (clouds.empty()) throw DataError("train: no scans given (use --scan or --synth)");
  return clouds;
}

json train_one(const TrainConfig& tc, const std::vector<PointCloud>& clouds, const GridFlags& gf,
               const std::string& output, long log_every) {
  Model<float> model(tc.model_config(), tc.seed);
  GridFlags g = gf;
  g.voxel_size = tc.voxel_size;
  std::vector<VoxelGrid> grids;
  for (const auto& c : clouds) grids.push_back(g.apply(c, model.config).grid);
  Trainer<float> trainer(model, tc);
  Stopwatch sw;
  LossReport last;
  for (long s = 0; s < tc.steps; ++s) {
    last = trainer.step({grids[static_cast<std::size_t>(s) % grids.size()]});
    if (log_every > 0 && ((s + 1) % log_every == 0 || s + 1 == tc.steps))
      std::cerr << json{{"step", s + 1},
                        {"loss", last.total},
                        {"distortion", last.distortion},
                        {"rate_content", last.rate_content},
                        {"rate_highfreq", last.rate_highfreq},
                        {"seconds", sw.seconds()}}
                       .dump()
                << std::endl;
    if (tc.checkpoint_every > 0 && (s + 1) % tc.checkpoint_every == 0 && s + 1 < tc.steps)
      model.save(output + ".step" + std::to_string(s + 1));
  }
  double uplift_loss = 0.0;
  if (tc.uplift_steps > 0) {
    const auto per = std::max<long>(1, tc.uplift_steps / static_cast<long>(grids.size()));
    for (std::size_t i = 0; i < grids.size(); ++i) {
      const auto rec = reconstruct(model, grids[i]);
      if (rec.grid.occupied_count() == 0) continue;
      uplift_loss = train_uplifter(model, rec.grid, rec.features, clouds[i], per, tc.uplift_lr, tc.seed);
    }
  }
  model.save(output);
  double iou = 0.0;
  for (const auto& grid : grids) iou += iou_grid(grid, reconstruct(model, grid).grid);
  return {{"checkpoint", output},
          {"lambda", tc.lambda},
          {"steps", tc.steps},
          {"loss", last.total},
          {"distortion", last.distortion},
          {"rate_content", last.rate_content},
          {"rate_highfreq", last.rate_highfreq},
          {"uplift_loss", uplift_loss},
          {"mean_iou", iou / static_cast<double>(grids.size())},
          {"seconds", sw.seconds()}};
}

int cmd_train(const TrainFlags& f) {
  TrainConfig tc = f.config.empty() ? TrainConfig{} : TrainConfig::load(f.config);
  if (f.steps >= 0) tc.steps = f.steps;
  if (f.lambda >= 0) tc.lambda = f.lambda;
  tc.validate();
  const auto cfg = tc.model_config();
  const auto clouds = training_clouds(f, cfg, tc.voxel_size);
  if (!f.ladder) {
    auto stats = train_one(tc, clouds, f.grid, f.output, f.log_every);
    json line{{"command", "train"}};
    line.update(stats);
    emit(line);
    return kOk;
  }
  for (std::size_t i = 0; i < tc.ladder.size(); ++i) {
    auto run = tc;
    run.lambda = tc.lambda0 * tc.ladder[i];
    auto stats = train_one(run, clouds, f.grid, f.output + "." + std::to_string(i), f.log_every);
    json line{{"command", "train"}, {"rung", i}};
    line.update(stats);
    emit(line);
  }
  return kOk;
}

struct EvalFlags {
  std::string reference, decoded, bitstream, label = "run", report;
  double peak = 0.0, grid = 0.1;
  int k = 9;
  double enc_time = 0.0, dec_time = 0.0;
};

int cmd_eval(const EvalFlags& f) {
  const auto ref = load_scan(f.reference);
  const auto dec = load_scan(f.decoded);
  if (ref.empty() || dec.empty()) throw DataError("eval: empty point cloud");
  const double peak = f.peak > 0 ? f.peak : default_peak(ref);
  RDPoint p;
  const auto d1 = psnr_d1(ref, dec, peak);
  const auto d2 = psnr_d2(ref, dec, peak, static_cast<std::size_t>(f.k));
  p.psnr_d1 = d1.psnr;
  p.psnr_d2 = d2.psnr;
  p.iou = iou_grid(ref, dec, f.grid);
  p.enc_time = f.enc_time;
  p.dec_time = f.dec_time;
  if (!f.bitstream.empty()) {
    const auto bytes = detail::read_file(f.bitstream);
    p.bpp = bits_per_point(bytes.size(), parse_bitstream(bytes).header.point_count);
  }
  if (!f.report.empty()) {
    std::vector<RDRow> rows;
    const bool as_json = ends_with(f.report, ".json");
    if (std::filesystem::exists(f.report)) {
      const auto text = detail::read_file(f.report);
      rows = as_json ? parse_rd_json(text) : parse_rd_csv(text);
    }
    rows.push_back({f.label, p});
    detail::write_file(f.report, as_json ? rd_report_json(rows) : rd_report_csv(rows));
  }
  emit({{"command", "eval"},
        {"label", f.label},
        {"peak", peak},
        {"psnr_d1", number(p.psnr_d1)},
        {"psnr_d2", number(p.psnr_d2)},
        {"mse_d1", d1.mse},
        {"mse_d2", d2.mse},
        {"d2_fallbacks", d2.fallbacks},
        {"iou", p.iou},
        {"bpp", f.bitstream.empty() ? json(nullptr) : json(p.bpp)}});
  return kOk;
}

RDCurve pick_curve(const std::string& path, const std::string& label) {
  const auto text = detail::read_file(path);
  const auto curves = rd_curves(ends_with(path, ".json") ? parse_rd_json(text) : parse_rd_csv(text));
  if (label.empty()) {
    if (curves.size() != 1)
      throw DataError("'" + path + "' holds " + std::to_string(curves.size()) + " curves; pick one with a label flag");
    return curves.front();
  }
  for (const auto& c : curves)
    if (c.label == label) return c;
  throw DataError("no curve labelled '" + label + "' in '" + path + "'");
}

int cmd_bdrate(const std::string& ref_path, const std::string& test_path, const std::string& ref_label,
               const std::string& test_label, const std::string& metric) {
  const auto ref = pick_curve(ref_path, ref_label);
  const auto test = pick_curve(test_path, test_label);
  const auto r = bd_metrics(ref, test, metric == "d2" ? BdMetric::d2 : BdMetric::d1);
  emit({{"command", "bdrate"},
        {"reference", ref.label},
        {"test", test.label},
        {"metric", metric},
        {"bd_rate", r.bd_rate},
        {"bd_psnr", r.bd_psnr}});
  return kOk;
}

int cmd_synth(const std::string& output, std::uint64_t seed, const std::string& spec_text, bool ascii) {
  SceneSpec spec = parse_scene_spec(spec_text);
  if (seed != 0) spec.seed = seed;
  const auto cloud = synth_scan(spec);
  if (ends_with(output, ".ply"))
    save_ply(output, cloud, ascii);
  else
    save_kitti_bin(output, cloud);
  emit({{"command", "synth"},
        {"points", cloud.size()},
        {"seed", spec.seed},
        {"extent", {spec.extent[0], spec.extent[1], spec.extent[2]}},
        {"output", output}});
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"flatec: triplane point-cloud geometry codec"};
  app.require_subcommand(1);

  std::string input, ckpt, output;
  GridFlags grid;
  auto* enc = app.add_subcommand("encode", "Compress a scan (.bin or .ply) into a .flt container");
  enc->add_option("-i,--input", input, "Input scan")->required()->check(CLI::ExistingFile);
  enc->add_option("-m,--model", ckpt, "Model checkpoint")->required();
  enc->add_option("-o,--output", output, "Output .flt file")->required();
  grid.add(enc);

  std::string binarize = "topk";
  double tau = 0.5;
  int rate = 0;
  bool ascii = false;
  auto* dec = app.add_subcommand("decode", "Reconstruct a point cloud from a .flt container");
  dec->add_option("-i,--input", input, "Input .flt file")->required()->check(CLI::ExistingFile);
  dec->add_option("-m,--model", ckpt, "Model checkpoint")->required();
  dec->add_option("-o,--output", output, "Output .ply file")->required();
  dec->add_option("--binarize", binarize, "Binarization: topk keeps the header's voxel count, thresh cuts at tau")
      ->capture_default_str()
      ->check(CLI::IsMember({"topk", "thresh"}));
  dec->add_option("--tau", tau, "Threshold for --binarize thresh")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  dec->add_option("--uplift-rate", rate, "Points per occupied voxel (0: voxel centres)")
      ->capture_default_str()
      ->check(CLI::Range(0, 64));
  dec->add_flag("--ascii", ascii, "Write ASCII PLY");

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Train a model on scans and/or synthetic scenes");
  train->add_option("-c,--config", tf.config, "Training config file (key = value lines)")->check(CLI::ExistingFile);
  train->add_option("-o,--output", tf.output, "Output checkpoint path (ladder runs append .0, .1, ...)")->required();
  train->add_option("-s,--scan", tf.scans, "Training scan(s)")->check(CLI::ExistingFile);
  train->add_option("--synth", tf.synth_count, "Number of synthetic scenes sized to the model grid")
      ->check(CLI::NonNegativeNumber);
  train->add_option("--synth-spec", tf.synth_spec, "Scene overrides key=value,... (see synth --help)");
  train->add_option("--steps", tf.steps, "Override the config's step count")->check(CLI::NonNegativeNumber);
  train->add_option("--lambda", tf.lambda, "Override the config's rate weight")->check(CLI::NonNegativeNumber);
  train->add_option("--log-every", tf.log_every, "Progress line interval on stderr (0: silent)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  train->add_flag("--ladder", tf.ladder, "Train one model per ladder entry (lambda = lambda0 * entry)");
  tf.grid.add(train);
  train->remove_option(train->get_option("--voxel-size"));

  EvalFlags ef;
  auto* eval = app.add_subcommand("eval", "Compare a decoded cloud with its reference");
  eval->add_option("-r,--reference", ef.reference, "Reference scan")->required()->check(CLI::ExistingFile);
  eval->add_option("-d,--decoded", ef.decoded, "Decoded cloud")->required()->check(CLI::ExistingFile);
  eval->add_option("-b,--bitstream", ef.bitstream, ".flt file for bits per point")->check(CLI::ExistingFile);
  eval->add_option("--peak", ef.peak, "PSNR peak (default: largest reference bounding-box extent)")
      ->check(CLI::PositiveNumber);
  eval->add_option("--grid", ef.grid, "IoU grid size")->capture_default_str()->check(CLI::PositiveNumber);
  eval->add_option("--k", ef.k, "Neighbours for D2 normals")->capture_default_str()->check(CLI::Range(3, 256));
  eval->add_option("--label", ef.label, "Curve label for --report")->capture_default_str();
  eval->add_option("--enc-time", ef.enc_time, "Encode seconds recorded in --report")->check(CLI::NonNegativeNumber);
  eval->add_option("--dec-time", ef.dec_time, "Decode seconds recorded in --report")->check(CLI::NonNegativeNumber);
  eval->add_option("--report", ef.report, "Append the RD point to this .csv or .json report");

  std::string ref_curve, test_curve, ref_label, test_label, metric = "d1";
  auto* bd = app.add_subcommand("bdrate", "Bjontegaard deltas between two RD curves");
  bd->add_option("--reference", ref_curve, "Reference RD report (.csv or .json)")->required()->check(CLI::ExistingFile);
  bd->add_option("--test", test_curve, "Test RD report (.csv or .json)")->required()->check(CLI::ExistingFile);
  bd->add_option("--reference-label", ref_label, "Curve label within the reference report");
  bd->add_option("--test-label", test_label, "Curve label within the test report");
  bd->add_option("--metric", metric, "Distortion metric")->capture_default_str()->check(CLI::IsMember({"d1", "d2"}));

  std::uint64_t seed = 0;
  std::string spec;
  auto* syn = app.add_subcommand("synth", "Write a deterministic synthetic scan");
  syn->add_option("-o,--output", output, "Output scan (.bin, or .ply by extension)")->required();
  syn->add_option("--seed", seed, "Scene seed (overrides the spec's seed when non-zero)");
  syn->add_option("--spec", spec,
                  "Overrides key=value,... with keys extent=XxYxZ, points, boxes, poles, rings, seed, noise, "
                  "sensor_height");
  syn->add_flag("--ascii", ascii, "Write ASCII PLY");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*enc) return cmd_encode(input, ckpt, output, grid);
    if (*dec) return cmd_decode(input, ckpt, output, binarize, tau, rate, ascii);
    if (*train) return cmd_train(tf);
    if (*eval) return cmd_eval(ef);
    if (*bd) return cmd_bdrate(ref_curve, test_curve, ref_label, test_label, metric);
    if (*syn) return cmd_synth(output, seed, spec, ascii);
  } catch (const ModelError& e) {
    std::cerr << "model error: " << e.what() << std::endl;
    return kModel;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kData;
  }
  return kUsage;
}
