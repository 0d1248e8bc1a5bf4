#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "flatec/error.hpp"
#include "flatec/model.hpp"

namespace flatec {

inline constexpr double kFocalClamp = 1e-7;

/// mean_i  -a_t (1 - p_t)^gamma log p_t  with p_t = p, a_t = alpha on occupied
/// voxels and p_t = 1 - p, a_t = 1 - alpha on empty ones; p_t clamped to [1e-7, 1].
template <class T>
Var<T> focal_loss(Graph<T>& g, const Var<T>& prob, const std::vector<std::uint8_t>& target, double alpha,
                  double gamma) {
  if (prob->size() != target.size())
    throw std::invalid_argument("focal_loss: " + std::to_string(prob->size()) + " probabilities for " +
                                std::to_string(target.size()) + " voxels");
  const double n = static_cast<double>(target.size());
  auto out = g.result({1}, {&prob});
  double total = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double p = static_cast<double>(prob->value[i]);
    const double pt = std::max(target[i] ? p : 1.0 - p, kFocalClamp);
    const double at = target[i] ? alpha : 1.0 - alpha;
    total -= at * std::pow(1.0 - pt, gamma) * std::log(pt);
  }
  out->value[0] = static_cast<T>(total / n);
  if (out->requires_grad) {
    g.push([prob, out, target, alpha, gamma, n] {
      auto& gp = prob->grad_buffer();
      const double go = static_cast<double>(out->grad[0]) / n;
      for (std::size_t i = 0; i < target.size(); ++i) {
        const double p = static_cast<double>(prob->value[i]);
        const double raw = target[i] ? p : 1.0 - p;
        if (raw < kFocalClamp) continue;
        const double at = target[i] ? alpha : 1.0 - alpha;
        const double q = 1.0 - raw;
        const double dpt = gamma == 0.0 ? -at / raw
                                        : -at * (-gamma * std::pow(q, gamma - 1.0) * std::log(raw) +
                                                 std::pow(q, gamma) / raw);
        gp[i] += static_cast<T>(go * (target[i] ? dpt : -dpt));
      }
    });
  }
  return out;
}

template <class T>
Var<T> focal_loss(Graph<T>& g, const Var<T>& prob, const VoxelGrid& target, double alpha, double gamma) {
  return focal_loss(g, prob, target.occupancy, alpha, gamma);
}

struct LossReport {
  double distortion = 0.0;     // D, nats (mean focal loss per voxel)
  double rate = 0.0;           // R = lambda1 * R_content + lambda2 * R_highfreq
  double total = 0.0;          // L = D + lambda * R
  double rate_content = 0.0;   // bits per voxel
  double rate_highfreq = 0.0;  // bits per voxel
  double lambda = 0.0, lambda1 = 1.0, lambda2 = 1.0;
  long step = 0;

  bool operator==(const LossReport&) const = default;
};

struct RdWeights {
  double lambda = 1.0;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
};

template <class T>
struct RdLoss {
  Var<T> total;
  LossReport report;
};

/// L = D + lambda * (lambda1 * R_content + lambda2 * R_highfreq).
template <class T>
RdLoss<T> rd_loss(Graph<T>& g, const Var<T>& distortion, const Var<T>& rate_content, const Var<T>& rate_highfreq,
                  const RdWeights& w, long step = 0) {
  auto rate = nn::add(g, nn::scale(g, rate_content, static_cast<T>(w.lambda1)),
                      nn::scale(g, rate_highfreq, static_cast<T>(w.lambda2)));
  auto total = nn::add(g, distortion, nn::scale(g, rate, static_cast<T>(w.lambda)));
  LossReport r;
  r.distortion = static_cast<double>(distortion->value[0]);
  r.rate_content = static_cast<double>(rate_content->value[0]);
  r.rate_highfreq = static_cast<double>(rate_highfreq->value[0]);
  r.rate = w.lambda1 * r.rate_content + w.lambda2 * r.rate_highfreq;
  r.total = r.distortion + w.lambda * r.rate;
  r.lambda = w.lambda;
  r.lambda1 = w.lambda1;
  r.lambda2 = w.lambda2;
  r.step = step;
  return {total, r};
}

/// Adaptive-moment descent with bias correction.
template <class T>
class Adam {
 public:
  /// `lr_scale` (optional, one entry per parameter) multiplies the step size of that parameter.
  explicit Adam(std::vector<Var<T>> params, std::vector<double> lr_scale = {}, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), scale_(std::move(lr_scale)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (scale_.empty()) scale_.assign(params_.size(), 1.0);
    if (scale_.size() != params_.size()) throw std::invalid_argument("Adam: lr_scale size mismatch");
    for (const auto& p : params_) {
      m_.emplace_back(p->size(), 0.0f);
      v_.emplace_back(p->size(), 0.0f);
    }
  }

  /// Global L2 norm of the current gradients.
  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_)
      for (T v : p->grad) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
  }

  /// Clips the global gradient norm to `clip` (if positive), then updates. Returns the pre-clip norm.
  double step(double lr, double clip) {
    const double norm = grad_norm();
    const double factor = clip > 0.0 && norm > clip ? clip / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (p->grad.size() != p->size()) continue;
      auto& m = m_[k];
      auto& v = v_[k];
      const double lr_k = lr * scale_[k];
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double gi = static_cast<double>(p->grad[i]) * factor;
        m[i] = static_cast<float>(beta1_ * m[i] + (1.0 - beta1_) * gi);
        v[i] = static_cast<float>(beta2_ * v[i] + (1.0 - beta2_) * gi * gi);
        const double update = lr_k * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        p->value[i] = static_cast<T>(static_cast<double>(p->value[i]) - update);
      }
    }
    return norm;
  }

  void zero_grad() {
    for (auto& p : params_) std::fill(p->grad.begin(), p->grad.end(), T{0});
  }

  long steps() const { return t_; }

 private:
  std::vector<Var<T>> params_;
  std::vector<double> scale_;
  std::vector<std::vector<float>> m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

/// lr0 * (floor + (1 - floor) * (1 + cos(pi * t / T)) / 2).
inline double cosine_lr(double lr0, long step, long total, double floor = 0.0) {
  if (total <= 0) return lr0;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return lr0 * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

/// Training hyperparameters; read from a `key = value` text file (# comments).
struct TrainConfig {
  std::string model = "desk";   // preset name or a full model config line
  std::vector<double> ladder{0.5, 1.0, 2.0, 4.0, 8.0};  // multiples of lambda0
  double lambda0 = 1.0;
  double lambda = 1.0;          // used by single runs
  double lambda1 = 1.0, lambda2 = 1.0;
  double alpha_focal = 0.75;
  double gamma = 2.0;
  double lr = 1e-3;
  double lr_floor = 0.0;        // cosine decay floor as a fraction of lr
  double density_lr_scale = 1.0;  // lr multiplier for the entropy model's density parameters
  double clip = 1.0;
  long steps = 1000;
  std::uint64_t seed = 1;
  bool decoder_ste = true;      // decoder sees rounded latents (straight-through) instead of noisy ones
  bool prior_bias = true;       // start the occupancy logit bias at the data's log-odds
  long uplift_steps = 200;
  double uplift_lr = 1e-3;
  double voxel_size = 0.1;
  long checkpoint_every = 0;

  RdWeights weights() const { return {lambda, lambda1, lambda2}; }

  ModelConfig model_config() const {
    return model.find('=') == std::string::npos ? model_preset(model) : ModelConfig::parse(model);
  }

  static TrainConfig parse(const std::string& text) {
    TrainConfig c;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const auto eq = line.find('=');
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
      };
      if (trim(line).empty()) continue;
      if (eq == std::string::npos) throw DataError("train config line " + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
      try {
        if (key == "model") c.model = val;
        else if (key == "ladder") {
          c.ladder.clear();
          std::istringstream vs(val);
          std::string part;
          while (std::getline(vs, part, ',')) c.ladder.push_back(std::stod(part));
        } else if (key == "lambda0") c.lambda0 = std::stod(val);
        else if (key == "lambda") c.lambda = std::stod(val);
        else if (key == "lambda1") c.lambda1 = std::stod(val);
        else if (key == "lambda2") c.lambda2 = std::stod(val);
        else if (key == "alpha_focal") c.alpha_focal = std::stod(val);
        else if (key == "gamma") c.gamma = std::stod(val);
        else if (key == "lr") c.lr = std::stod(val);
        else if (key == "lr_floor") c.lr_floor = std::stod(val);
        else if (key == "density_lr_scale") c.density_lr_scale = std::stod(val);
        else if (key == "clip") c.clip = std::stod(val);
        else if (key == "steps") c.steps = std::stol(val);
        else if (key == "seed") c.seed = std::stoull(val);
        else if (key == "decoder_ste") c.decoder_ste = val == "1" || val == "true";
        else if (key == "prior_bias") c.prior_bias = val == "1" || val == "true";
        else if (key == "uplift_steps") c.uplift_steps = std::stol(val);
        else if (key == "uplift_lr") c.uplift_lr = std::stod(val);
        else if (key == "voxel_size") c.voxel_size = std::stod(val);
        else if (key == "checkpoint_every") c.checkpoint_every = std::stol(val);
        else throw DataError("train config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
      } catch (const std::logic_error&) {
        throw DataError("train config line " + std::to_string(lineno) + ": bad value for '" + key + "'");
      }
    }
    c.validate();
    return c;
  }

  static TrainConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open train config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  void validate() const {
    auto bad = [](const std::string& why) { throw DataError("train config: " + why); };
    if (!(lambda >= 0 && lambda0 > 0 && lambda1 >= 0 && lambda2 >= 0)) bad("lambdas must be non-negative");
    for (double l : ladder)
      if (!(l > 0)) bad("ladder entries must be positive");
    if (!(alpha_focal >= 0 && alpha_focal <= 1)) bad("alpha_focal outside [0, 1]");
    if (!(gamma >= 0)) bad("gamma must be non-negative");
    if (!(lr >= 0) || !(density_lr_scale > 0) || !(clip >= 0) || steps < 0 || uplift_steps < 0) bad("negative optimizer setting");
    if (!(voxel_size > 0)) bad("voxel_size must be positive");
  }
};

/// Rate-distortion trainer for everything except the uplifter.
template <class T>
class Trainer {
 public:
  Trainer(Model<T>& model, TrainConfig cfg)
      : model_(model), cfg_(std::move(cfg)), adam_(trainable(model), lr_scales(model, cfg_)) {}

  /// One descent step on the mean loss of `batch`. Throws ModelError on a non-finite loss.
  LossReport step(const std::vector<VoxelGrid>& batch) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    if (step_ == 0 && cfg_.prior_bias) init_prior(batch);
    model_.store.zero_grad();
    LossReport mean;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::uint64_t seed = mix_seed(cfg_.seed, static_cast<std::uint64_t>(step_) * 1024 + b);
      Graph<T> g(true, true, seed);
      auto [loss, report] = forward(g, model_, batch[b], cfg_, seed, step_);
      if (!std::isfinite(report.total))
        throw ModelError("non-finite loss at step " + std::to_string(step_) + " (D=" +
                         std::to_string(report.distortion) + ", Rc=" + std::to_string(report.rate_content) +
                         ", Rh=" + std::to_string(report.rate_highfreq) + ")");
      g.backward(nn::scale(g, loss, static_cast<T>(1.0 / batch.size())));
      accumulate(mean, report, static_cast<double>(batch.size()));
    }
    mean.lambda = cfg_.lambda;
    mean.lambda1 = cfg_.lambda1;
    mean.lambda2 = cfg_.lambda2;
    mean.step = step_;
    last_grad_norm_ = adam_.step(cosine_lr(cfg_.lr, step_, cfg_.steps, cfg_.lr_floor), cfg_.clip);
    ++step_;
    return mean;
  }

  long steps_done() const { return step_; }
  double last_grad_norm() const { return last_grad_norm_; }

  /// Training-mode forward pass: (L, report).
  static RdLoss<T> forward(Graph<T>& g, const Model<T>& m, const VoxelGrid& grid, const TrainConfig& cfg,
                           std::uint64_t seed, long step = 0) {
    const auto latents = analysis(g, m, grid);
    const int cs = m.config.latent_channels();
    std::array<PlaneLatents<T>, 3> decoder_in;
    Var<T> rc, rh;
    for (int p = 0; p < 3; ++p) {
      auto nc = quantize_train(g, latents[p].content, mix_seed(seed, 2 * p));
      auto nh = quantize_train(g, latents[p].highfreq, mix_seed(seed, 2 * p + 1));
      auto bc = rate_bits(g, nc, m.content_density, p * cs);
      auto bh = rate_bits(g, nh, m.highfreq_density, p * cs);
      rc = rc ? nn::add(g, rc, bc) : bc;
      rh = rh ? nn::add(g, rh, bh) : bh;
      if (cfg.decoder_ste) {
        decoder_in[p] = {nn::round_straight_through(g, latents[p].content),
                         nn::round_straight_through(g, latents[p].highfreq)};
      } else {
        decoder_in[p] = {nc, nh};
      }
    }
    const T per_voxel = static_cast<T>(1.0 / static_cast<double>(grid.voxel_count()));
    rc = nn::scale(g, rc, per_voxel);
    rh = nn::scale(g, rh, per_voxel);
    auto prob = occupancy_head(g, synthesis(g, m, decoder_in), m.head);
    auto d = focal_loss(g, prob, grid, cfg.alpha_focal, cfg.gamma);
    return rd_loss(g, d, rc, rh, cfg.weights(), step);
  }

 private:
  static std::vector<Var<T>> trainable(const Model<T>& m) {
    std::vector<Var<T>> v;
    for (const auto& p : m.store.all())
      if (p.trainable && p.id.rfind("uplift.", 0) != 0) v.push_back(p.var);
    return v;
  }

  static std::vector<double> lr_scales(const Model<T>& m, const TrainConfig& cfg) {
    std::vector<double> v;
    for (const auto& p : m.store.all())
      if (p.trainable && p.id.rfind("uplift.", 0) != 0)
        v.push_back(p.id.rfind("density.", 0) == 0 ? cfg.density_lr_scale : 1.0);
    return v;
  }

  void init_prior(const std::vector<VoxelGrid>& batch) {
    double occ = 0, total = 0;
    for (const auto& gr : batch) {
      occ += static_cast<double>(gr.occupied_count());
      total += static_cast<double>(gr.voxel_count());
    }
    const double p = std::clamp(occ / total, 1e-4, 1.0 - 1e-4);
    model_.head.out.bias->value[0] = static_cast<T>(std::log(p / (1.0 - p)));
  }

  static void accumulate(LossReport& mean, const LossReport& r, double n) {
    mean.distortion += r.distortion / n;
    mean.rate += r.rate / n;
    mean.total += r.total / n;
    mean.rate_content += r.rate_content / n;
    mean.rate_highfreq += r.rate_highfreq / n;
  }

  Model<T>& model_;
  TrainConfig cfg_;
  Adam<T> adam_;
  long step_ = 0;
  double last_grad_norm_ = 0.0;
};

/// Mean over predicted points of the squared distance to the nearest target point in the
/// same voxel, plus the mean over target points of the distance to the nearest prediction.
/// `pred` is [n * f, 3] with rows grouped per voxel; `targets[i]` lists voxel i's points.
template <class T>
Var<T> in_voxel_chamfer(Graph<T>& g, const Var<T>& pred, int f, const std::vector<std::vector<Point3>>& targets) {
  const std::size_t n = targets.size();
  if (pred->size() != n * static_cast<std::size_t>(f) * 3)
    throw std::invalid_argument("in_voxel_chamfer: prediction count does not match voxel groups");
  auto out = g.result({1}, {&pred});
  std::size_t n_pred = 0, n_tgt = 0;
  for (const auto& t : targets)
    if (!t.empty()) {
      n_pred += static_cast<std::size_t>(f);
      n_tgt += t.size();
    }
  if (n_pred == 0) return out;
  // (pred row, target point) pairs carrying the gradient, with weights
  std::vector<std::pair<std::size_t, Point3>> pairs;
  std::vector<double> weights;
  double loss = 0.0;
  auto sq = [&](std::size_t row, const Point3& q) {
    double s = 0;
    for (int a = 0; a < 3; ++a) {
      const double d = static_cast<double>(pred->value[row * 3 + a]) - q[a];
      s += d * d;
    }
    return s;
  };
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = targets[i];
    if (t.empty()) continue;
    for (int j = 0; j < f; ++j) {
      const std::size_t row = i * f + j;
      std::size_t best = 0;
      for (std::size_t q = 1; q < t.size(); ++q)
        if (sq(row, t[q]) < sq(row, t[best])) best = q;
      loss += sq(row, t[best]) / static_cast<double>(n_pred);
      pairs.push_back({row, t[best]});
      weights.push_back(1.0 / static_cast<double>(n_pred));
    }
    for (const auto& q : t) {
      std::size_t best = i * f;
      for (int j = 1; j < f; ++j)
        if (sq(i * f + j, q) < sq(best, q)) best = i * f + j;
      loss += sq(best, q) / static_cast<double>(n_tgt);
      pairs.push_back({best, q});
      weights.push_back(1.0 / static_cast<double>(n_tgt));
    }
  }
  out->value[0] = static_cast<T>(loss);
  if (out->requires_grad) {
    g.push([pred, out, pairs = std::move(pairs), weights = std::move(weights)] {
      auto& gp = pred->grad_buffer();
      const double go = static_cast<double>(out->grad[0]);
      for (std::size_t k = 0; k < pairs.size(); ++k)
        for (int a = 0; a < 3; ++a) {
          const std::size_t idx = pairs[k].first * 3 + a;
          gp[idx] += static_cast<T>(go * weights[k] * 2.0 * (static_cast<double>(pred->value[idx]) - pairs[k].second[a]));
        }
    });
  }
  return out;
}

/// Groups cloud points by the occupied voxels of `grid` (lexicographic voxel order).
inline std::vector<std::vector<Point3>> points_per_voxel(const VoxelGrid& grid, const PointCloud& cloud) {
  const auto occupied = occupied_indices(grid);
  std::unordered_map<std::size_t, std::size_t> slot;
  for (std::size_t i = 0; i < occupied.size(); ++i) slot[occupied[i]] = i;
  std::vector<std::vector<Point3>> groups(occupied.size());
  for (const auto& p : cloud.points) {
    std::array<int, 3> v{};
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      v[a] = static_cast<int>(std::floor((p[a] - grid.origin[a]) / grid.voxel_size));
      inside = inside && v[a] >= 0 && v[a] < grid.dims[a];
    }
    if (!inside) continue;
    if (auto it = slot.find(grid.index(v[0], v[1], v[2])); it != slot.end()) groups[it->second].push_back(p);
  }
  return groups;
}

/// Fits the uplifter on (decoded grid, refined features, original cloud), cycling the
/// rate over {1, 2, 4, 8}. Returns the final loss.
template <class T>
double train_uplifter(Model<T>& m, const VoxelGrid& decoded, const Var<T>& features, const PointCloud& cloud,
                      long steps, double lr, std::uint64_t seed) {
  (void)seed;
  const auto groups = points_per_voxel(decoded, cloud);
  Adam<T> adam(m.parameters("uplift."));
  const auto fixed = nn::constant(features->value);
  double last = 0.0;
  for (long s = 0; s < steps; ++s) {
    const int f = 1 << (s % 4);
    m.store.zero_grad();
    Graph<T> g(true, true, 0);
    auto loss = in_voxel_chamfer(g, uplift(g, decoded, fixed, f, m.uplifter), f, groups);
    last = static_cast<double>(loss->value[0]);
    g.backward(loss);
    adam.step(cosine_lr(lr, s, steps), 1.0);
  }
  return last;
}

}  // namespace flatec
