#pragma once

// Likelihood training and approximate posterior: Gaussian NLL over observed
// entries, Adam then constant-rate SGD, SWAG statistics collected along the
// SGD trajectory, deep-ensemble training and model-averaged prediction.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <exception>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "diffhybrid/array.hpp"
#include "diffhybrid/autodiff.hpp"
#include "diffhybrid/errors.hpp"
#include "diffhybrid/moments.hpp"
#include "diffhybrid/systems.hpp"

namespace diffhybrid {

struct Observation {
  std::size_t frame = 0;
  std::size_t var = 0;
  std::size_t point = 0;
  double value = 0.0;
};

struct Dataset {
  GridSpec grid;
  std::vector<Observation> entries;

  std::size_t last_frame() const {
    std::size_t last = 0;
    for (const auto& e : entries) last = std::max(last, e.frame);
    return last;
  }
};

/// Observed entries grouped by (frame, variable) in canonical order, so the
/// loss does not depend on the order of the dataset.
class ObservationPlan {
 public:
  struct Group {
    std::size_t frame;
    std::size_t var;
    std::shared_ptr<const std::vector<std::size_t>> points;
    Array values;  // 1 x points
  };

  explicit ObservationPlan(const Dataset& data) {
    if (data.entries.empty()) throw ConfigError("dataset has no observed entries");
    std::vector<Observation> e = data.entries;
    for (const auto& o : e) {
      if (o.var >= data.grid.n_v || o.point >= data.grid.points()) {
        throw ConfigError("dataset entry (frame " + std::to_string(o.frame) + ", var " +
                          std::to_string(o.var) + ", point " + std::to_string(o.point) +
                          ") lies outside the grid");
      }
      if (!std::isfinite(o.value)) throw ConfigError("dataset entry has a non-finite value");
    }
    std::sort(e.begin(), e.end(), [](const Observation& a, const Observation& b) {
      return std::tie(a.frame, a.var, a.point, a.value) <
             std::tie(b.frame, b.var, b.point, b.value);
    });
    for (std::size_t i = 0; i < e.size();) {
      std::size_t j = i;
      std::vector<std::size_t> pts;
      std::vector<double> vals;
      while (j < e.size() && e[j].frame == e[i].frame && e[j].var == e[i].var) {
        pts.push_back(e[j].point);
        vals.push_back(e[j].value);
        ++j;
      }
      groups_.push_back({e[i].frame, e[i].var,
                         std::make_shared<const std::vector<std::size_t>>(std::move(pts)),
                         Array::row(vals)});
      i = j;
    }
    count_ = e.size();
    last_frame_ = e.back().frame;
  }

  const std::vector<Group>& groups() const { return groups_; }
  std::size_t count() const { return count_; }
  std::size_t last_frame() const { return last_frame_; }

 private:
  std::vector<Group> groups_;
  std::size_t count_ = 0;
  std::size_t last_frame_ = 0;
};

/// Mean over observed entries of 0.5 log var + (v - mean)^2 / (2 var), with
/// var floored at 1e-12.
template <class A>
A nll_loss(const std::vector<MomentField<A>>& frames, const ObservationPlan& plan) {
  if (plan.last_frame() >= frames.size()) {
    throw ConfigError("nll_loss: observation at frame " + std::to_string(plan.last_frame()) +
                      " but the rollout has " + std::to_string(frames.size()) + " frames");
  }
  A total;
  bool first = true;
  for (const auto& g : plan.groups()) {
    const MomentField<A>& f = frames[g.frame];
    const A mu = gather(f.mean[g.var], g.points);
    const A var = clamp_min(gather(f.var[g.var], g.points), kVarianceFloor);
    const A resid = constant_like(mu, g.values) - mu;
    const A term = sum(log(var) * 0.5 + square(resid) / (var * 2.0));
    total = first ? term : total + term;
    first = false;
  }
  return total * (1.0 / static_cast<double>(plan.count()));
}

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(std::span<double> theta, std::span<const double> grad) {
    if (m_.empty()) {
      m_.assign(theta.size(), 0.0);
      v_.assign(theta.size(), 0.0);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
      theta[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

class Sgd {
 public:
  explicit Sgd(double lr) : lr_(lr) {}
  void step(std::span<double> theta, std::span<const double> grad) const {
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr_ * grad[i];
  }

 private:
  double lr_;
};

/// Running first and second moments of an iterate sequence plus the last
/// `rank` deviations from the running mean.
class SwagStats {
 public:
  SwagStats() = default;
  SwagStats(std::size_t dim, std::size_t rank) : dim_(dim), rank_(rank) {
    if (rank < 2) throw ConfigError("SwagStats: rank must be at least 2");
    mean_.assign(dim, 0.0);
    sq_mean_.assign(dim, 0.0);
  }

  static SwagStats restore(std::size_t rank, std::size_t samples, std::vector<double> mean,
                           std::vector<double> sq_mean, std::deque<std::vector<double>> deviations) {
    SwagStats s(mean.size(), rank);
    if (sq_mean.size() != mean.size()) throw ConfigError("SwagStats: moment lengths differ");
    for (const auto& d : deviations) {
      if (d.size() != mean.size()) throw ConfigError("SwagStats: deviation length mismatch");
    }
    if (deviations.size() > rank) throw ConfigError("SwagStats: more deviation columns than rank");
    s.samples_ = samples;
    s.mean_ = std::move(mean);
    s.sq_mean_ = std::move(sq_mean);
    s.dev_ = std::move(deviations);
    return s;
  }

  void collect(std::span<const double> theta) {
    if (theta.size() != dim_) throw ConfigError("SwagStats: parameter length mismatch");
    const double n = static_cast<double>(samples_);
    for (std::size_t i = 0; i < dim_; ++i) {
      mean_[i] = (n * mean_[i] + theta[i]) / (n + 1.0);
      sq_mean_[i] = (n * sq_mean_[i] + theta[i] * theta[i]) / (n + 1.0);
    }
    ++samples_;
    std::vector<double> d(dim_);
    for (std::size_t i = 0; i < dim_; ++i) d[i] = theta[i] - mean_[i];
    dev_.push_back(std::move(d));
    if (dev_.size() > rank_) dev_.pop_front();
  }

  std::size_t dim() const { return dim_; }
  std::size_t rank() const { return rank_; }
  std::size_t samples() const { return samples_; }
  std::size_t columns() const { return dev_.size(); }
  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& sq_mean() const { return sq_mean_; }
  const std::deque<std::vector<double>>& deviations() const { return dev_; }

  std::vector<double> diag_variance() const {
    std::vector<double> d(dim_);
    for (std::size_t i = 0; i < dim_; ++i) d[i] = std::max(sq_mean_[i] - mean_[i] * mean_[i], 0.0);
    return d;
  }

  /// Marginal variance of the sampling distribution:
  /// 0.5 (diag + sum_k dev_k^2 / (k - 1)).
  std::vector<double> marginal_variance() const {
    require_sampleable();
    std::vector<double> v = diag_variance();
    const double k = static_cast<double>(columns());
    for (std::size_t i = 0; i < dim_; ++i) {
      double s = 0.0;
      for (const auto& d : dev_) s += d[i] * d[i];
      v[i] = 0.5 * (v[i] + s / (k - 1.0));
    }
    return v;
  }

  bool sampleable() const { return columns() >= 2; }

  /// theta_swa + sqrt(diag) z1 / sqrt(2) + D z2 / sqrt(2 (k - 1)).
  std::vector<double> sample(std::span<const double> z1, std::span<const double> z2) const {
    require_sampleable();
    if (z1.size() != dim_ || z2.size() != columns()) {
      throw ConfigError("SwagStats: noise vector length mismatch");
    }
    const std::vector<double> diag = diag_variance();
    const double c1 = 1.0 / std::sqrt(2.0);
    const double c2 = 1.0 / std::sqrt(2.0 * (static_cast<double>(columns()) - 1.0));
    std::vector<double> out(dim_);
    for (std::size_t i = 0; i < dim_; ++i) {
      double low_rank = 0.0;
      for (std::size_t k = 0; k < dev_.size(); ++k) low_rank += dev_[k][i] * z2[k];
      out[i] = mean_[i] + c1 * std::sqrt(diag[i]) * z1[i] + c2 * low_rank;
    }
    return out;
  }

  template <class Rng>
  std::vector<double> sample(Rng& rng) const {
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> z1(dim_), z2(columns());
    for (double& z : z1) z = n01(rng);
    for (double& z : z2) z = n01(rng);
    return sample(z1, z2);
  }

 private:
  void require_sampleable() const {
    if (!sampleable()) {
      throw ConfigError("SwagStats: sampling needs at least 2 deviation columns, have " +
                        std::to_string(columns()));
    }
  }

  std::size_t dim_ = 0;
  std::size_t rank_ = 2;
  std::size_t samples_ = 0;
  std::vector<double> mean_;
  std::vector<double> sq_mean_;
  std::deque<std::vector<double>> dev_;
};

struct TrainConfig {
  std::size_t members = 4;
  std::size_t epochs = 3000;
  double swag_start = 0.75;
  double lr_explore = 1e-2;
  double lr_swag = 1e-3;
  std::size_t rank = 20;
  std::size_t interval = 1;
  double clip_norm = 1.0;  // 0 disables gradient-norm clipping
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0: one worker per member

  std::size_t swag_epoch() const {
    return static_cast<std::size_t>(std::floor(swag_start * static_cast<double>(epochs)));
  }

  void validate() const {
    if (members < 1) throw ConfigError("train: members must be at least 1");
    if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
    if (!(swag_start >= 0.0 && swag_start < 1.0)) {
      throw ConfigError("train: swag_start must lie in [0, 1)");
    }
    if (!(lr_explore > 0.0) || !(lr_swag > 0.0)) {
      throw ConfigError("train: learning rates must be positive");
    }
    if (rank < 2) throw ConfigError("train: rank must be at least 2");
    if (interval < 1) throw ConfigError("train: interval must be at least 1");
    if (clip_norm < 0.0) throw ConfigError("train: clip_norm must be non-negative");
  }
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Diffusion coefficients at one epoch; std is NaN until SWAG can sample.
struct CoefficientRecord {
  std::size_t epoch = 0;
  double d[2] = {0.0, 0.0};
  double d_std[2] = {std::numeric_limits<double>::quiet_NaN(),
                     std::numeric_limits<double>::quiet_NaN()};
};

struct MemberResult {
  std::size_t index = 0;
  bool ok = false;
  std::string error;
  std::vector<double> final_params;
  SwagStats swag;
  std::vector<double> losses;
  std::vector<CoefficientRecord> coefficients;
};

/// Per-coefficient (value, std) from a member's SWAG marginal via the
/// log-normal delta rule.
inline void fill_coefficients(const SystemSpec& spec, const std::vector<double>& theta,
                              const SwagStats& swag, CoefficientRecord& rec) {
  const ParamLayout layout = spec.layout();
  if (!layout.has(kSegmentDiffusion)) return;
  const Segment& seg = layout.at(kSegmentDiffusion);
  const std::vector<double> var =
      swag.sampleable() ? swag.marginal_variance() : std::vector<double>{};
  for (std::size_t i = 0; i < 2; ++i) {
    rec.d[i] = std::exp(theta[seg.offset + i]);
    if (!var.empty()) rec.d_std[i] = rec.d[i] * std::sqrt(var[seg.offset + i]);
  }
}

/// One ensemble member: Adam for the exploration phase, then constant-rate
/// SGD while SWAG moments are collected every `interval` epochs.
inline MemberResult train_member(const SystemSpec& spec, const ObservationPlan& plan,
                                 const std::vector<Array>& mu0, std::size_t steps,
                                 const TrainConfig& cfg, std::size_t index) {
  cfg.validate();
  if (steps < plan.last_frame()) {
    throw ConfigError("train: rollout of " + std::to_string(steps) +
                      " steps does not reach observed frame " + std::to_string(plan.last_frame()));
  }
  MemberResult r;
  r.index = index;
  ParamVector p = spec.initial_params(mix_seed(cfg.seed, index));
  std::vector<double>& theta = p.values;
  r.swag = SwagStats(theta.size(), cfg.rank);
  Adam adam(cfg.lr_explore);
  const Sgd sgd(cfg.lr_swag);
  const std::size_t swag_epoch = cfg.swag_epoch();
  const bool has_coefficients = spec.layout().has(kSegmentDiffusion);

  std::size_t epoch = 0;
  try {
    for (; epoch < cfg.epochs; ++epoch) {
      ad::Tape tape;
      const ad::Var th = tape.leaf(Array::column(theta));
      const auto frames = HybridModel<ad::Var>(spec, th).rollout(mu0, std::max<std::size_t>(steps, 1));
      const ad::Var loss = nll_loss(frames, plan);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) throw NumericalError("non-finite loss");
      r.losses.push_back(lv);
      std::vector<double> g = tape.backward(loss).wrt(th).storage();
      double norm2 = 0.0;
      for (double x : g) norm2 += x * x;
      if (!std::isfinite(norm2)) throw NumericalError("non-finite gradient");
      if (cfg.clip_norm > 0.0 && norm2 > cfg.clip_norm * cfg.clip_norm) {
        const double s = cfg.clip_norm / std::sqrt(norm2);
        for (double& x : g) x *= s;
      }
      if (epoch < swag_epoch) {
        adam.step(theta, g);
      } else {
        sgd.step(theta, g);
        if ((epoch - swag_epoch) % cfg.interval == 0) r.swag.collect(theta);
      }
      if (has_coefficients) {
        CoefficientRecord rec;
        rec.epoch = epoch;
        fill_coefficients(spec, theta, r.swag, rec);
        r.coefficients.push_back(rec);
      }
    }
  } catch (const NumericalError& e) {
    r.ok = false;
    r.error = "member " + std::to_string(index) + " aborted at epoch " + std::to_string(epoch) +
              ": " + e.what();
    r.final_params = theta;
    return r;
  }
  r.ok = r.swag.sampleable();
  if (!r.ok) {
    r.error = "member " + std::to_string(index) + " collected fewer than 2 SWAG samples";
  }
  r.final_params = theta;
  return r;
}

/// Runs `count` independent jobs on up to `threads` workers; job i writes only
/// its own slot, so results do not depend on scheduling.
template <class Job>
void run_parallel(std::size_t count, std::size_t threads, Job&& job) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads == 0 ? count : threads, count));
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline std::vector<MemberResult> train_ensemble(const SystemSpec& spec, const Dataset& data,
                                                const std::vector<Array>& mu0, std::size_t steps,
                                                const TrainConfig& cfg) {
  cfg.validate();
  const ObservationPlan plan(data);
  std::vector<MemberResult> out(cfg.members);
  run_parallel(cfg.members, cfg.threads,
               [&](std::size_t i) { out[i] = train_member(spec, plan, mu0, steps, cfg, i); });
  return out;
}

/// Model-averaged prediction. All fields are indexed [frame][variable] with
/// 1 x points rows.
struct Prediction {
  std::vector<std::vector<Array>> mean;
  std::vector<std::vector<Array>> aleatoric;
  std::vector<std::vector<Array>> epistemic;
  std::size_t draws = 0;
  std::size_t failed = 0;

  std::size_t frames() const { return mean.size(); }
};

struct PredictConfig {
  std::size_t draws = 32;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
};

/// Mean of draw means, mean of draw variances (aleatoric) and mean squared
/// deviation of draw means (epistemic), frame by frame.
inline void combine_draws(const std::vector<const std::vector<Field>*>& good, Prediction& p) {
  if (good.empty()) throw ConfigError("combine_draws: no draws");
  const double inv = 1.0 / static_cast<double>(good.size());
  const std::size_t n_frames = good.front()->size();
  const Field& first = good.front()->front();
  const std::size_t n_vars = first.n_vars();
  const std::size_t n_pts = first.mean.front().cols();
  p.mean.assign(n_frames, std::vector<Array>(n_vars, Array(1, n_pts, 0.0)));
  p.aleatoric = p.mean;
  p.epistemic = p.mean;
  for (std::size_t f = 0; f < n_frames; ++f) {
    for (std::size_t v = 0; v < n_vars; ++v) {
      Array& m = p.mean[f][v];
      Array& a = p.aleatoric[f][v];
      Array& e = p.epistemic[f][v];
      // Sums are taken relative to the first draw so identical draws give
      // exactly their own mean and variance.
      const Field& ref = (*good.front())[f];
      for (const auto* run : good) {
        const Field& fr = (*run)[f];
        for (std::size_t i = 0; i < n_pts; ++i) {
          m[i] += fr.mean[v][i] - ref.mean[v][i];
          a[i] += fr.var[v][i] - ref.var[v][i];
        }
      }
      for (std::size_t i = 0; i < n_pts; ++i) {
        m[i] = ref.mean[v][i] + m[i] * inv;
        a[i] = std::max(ref.var[v][i] + a[i] * inv, 0.0);
      }
      for (const auto* run : good) {
        const Field& fr = (*run)[f];
        for (std::size_t i = 0; i < n_pts; ++i) {
          const double d = fr.mean[v][i] - m[i];
          e[i] += d * d;
        }
      }
      for (std::size_t i = 0; i < n_pts; ++i) e[i] *= inv;
    }
  }
}

/// Draw j uses member j mod N with its own seeded stream. Failed draws are
/// skipped; more than half failing rejects the prediction.
inline Prediction bma_predict(const SystemSpec& spec, const std::vector<SwagStats>& members,
                              const std::vector<Array>& mu0, std::size_t steps,
                              const PredictConfig& cfg) {
  if (members.empty()) throw ConfigError("bma_predict: no ensemble members");
  if (cfg.draws < 1) throw ConfigError("bma_predict: draws must be at least 1");
  std::vector<std::vector<Field>> runs(cfg.draws);
  std::vector<char> ok(cfg.draws, 0);
  run_parallel(cfg.draws, cfg.threads, [&](std::size_t j) {
    std::mt19937_64 rng(mix_seed(cfg.seed, j));
    const std::vector<double> theta = members[j % members.size()].sample(rng);
    try {
      const HybridModel<Array> model(spec, Array::column(theta));
      runs[j] = steps == 0 ? std::vector<Field>{model.initial(mu0)} : model.rollout(mu0, steps);
      ok[j] = 1;
    } catch (const NumericalError&) {
      ok[j] = 0;
    }
  });

  Prediction p;
  p.draws = cfg.draws;
  std::vector<const std::vector<Field>*> good;
  for (std::size_t j = 0; j < cfg.draws; ++j) {
    if (ok[j]) good.push_back(&runs[j]);
  }
  p.failed = cfg.draws - good.size();
  if (good.empty() || 2 * p.failed > cfg.draws) {
    throw NumericalError("bma_predict: " + std::to_string(p.failed) + " of " +
                         std::to_string(cfg.draws) + " posterior draws diverged");
  }
  combine_draws(good, p);
  return p;
}

/// Ensemble estimate of the diffusion coefficients at the final epoch: the
/// mixture over members, each contributing its final value and SWAG std.
struct CoefficientEstimate {
  double mean[2] = {0.0, 0.0};
  double std[2] = {0.0, 0.0};
};

inline CoefficientEstimate ensemble_coefficients(const std::vector<CoefficientRecord>& finals) {
  if (finals.empty()) throw ConfigError("ensemble_coefficients: no members");
  CoefficientEstimate est;
  const double n = static_cast<double>(finals.size());
  for (std::size_t i = 0; i < 2; ++i) {
    double m = 0.0, within = 0.0, between = 0.0;
    for (const auto& r : finals) m += r.d[i];
    m /= n;
    for (const auto& r : finals) {
      const double s = std::isfinite(r.d_std[i]) ? r.d_std[i] : 0.0;
      within += s * s;
      between += (r.d[i] - m) * (r.d[i] - m);
    }
    est.mean[i] = m;
    est.std[i] = std::sqrt((within + between) / n);
  }
  return est;
}

}  // namespace diffhybrid
