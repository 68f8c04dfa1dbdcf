#pragma once

// Seeded generator of multi-annotator datasets with known consensus
// structure.
//
// Each subject gets smooth latent trajectories mu*(t) and sigma*(t) (sums of
// low-frequency sinusoids, sigma* kept strictly inside the valid Beta region).
// Features are a fixed random linear map of [mu*, sigma*, nuisance] plus
// Gaussian noise. Annotator i at time t reports the u_i(t)-quantile of
// Beta(moment_match(mu*(t), sigma*(t))), where u_i(t) = Phi(z_i(t)) and z_i is
// a stationary AR(1) process; at any fixed t the annotators are therefore
// i.i.d. draws from the target Beta while each trace stays temporally smooth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "betacons/beta_model.hpp"
#include "betacons/errors.hpp"
#include "betacons/pipeline.hpp"
#include "betacons/rng.hpp"

namespace betacons {

struct SyntheticConfig {
  int n_subjects = 20;
  double duration = 900.0;  // seconds per subject
  double frame_rate = 25.0;
  int n_annotators = 6;
  int feature_dim = 16;  // per modality
  int latent_dim = 4;
  double noise_std = 0.05;
  std::uint64_t seed = 20240501;
  int n_modalities = 2;
  // Range of sigma* / sqrt(mu* (1 - mu*)); must stay inside (0, 1).
  double spread_lo = 0.03;
  double spread_hi = 0.3;
  // Correlation time (s) of each annotator's quantile process.
  double annotator_persistence = 30.0;
  // Std of a constant per-annotator offset (clipped to [0, 1]); 0 disables.
  double annotator_bias_std = 0.0;
  // Features become [mu*, sigma*, nuisance..., 0...] instead of a random map.
  bool identity_map = false;
  WindowConfig window;

  void validate() const {
    auto fail = [](const std::string& what) { throw DomainError("SyntheticConfig: " + what); };
    if (n_subjects < 1) fail("n_subjects must be positive");
    if (!(duration > 0.0)) fail("duration must be positive");
    if (!(frame_rate > 0.0)) fail("frame_rate must be positive");
    if (n_annotators < 2) fail("n_annotators must be >= 2");
    if (feature_dim < 1) fail("feature_dim must be positive");
    if (latent_dim < 1) fail("latent_dim must be positive");
    if (!(noise_std >= 0.0)) fail("noise_std must be non-negative");
    if (n_modalities < 1) fail("n_modalities must be positive");
    if (!(spread_lo > 0.0 && spread_lo <= spread_hi && spread_hi < 1.0)) fail("need 0 < spread_lo <= spread_hi < 1");
    if (!(annotator_persistence > 0.0)) fail("annotator_persistence must be positive");
    if (!(annotator_bias_std >= 0.0)) fail("annotator_bias_std must be non-negative");
    if (identity_map && feature_dim < 2) fail("identity_map needs feature_dim >= 2");
    window.validate();
  }

  std::size_t frames_per_subject() const {
    return static_cast<std::size_t>(std::floor(duration * frame_rate + 1e-9));
  }
};

inline std::string synthetic_subject_id(int s) {
  std::string id = std::to_string(s);
  return "S" + std::string(id.size() < 3 ? 3 - id.size() : 0, '0') + id;
}
inline std::string synthetic_annotator_id(int a) { return "A" + std::to_string(a); }
inline std::string synthetic_modality_name(int m) { return "mod" + std::to_string(m); }

struct GroundTruthWindow {
  std::string subject_id;
  std::int64_t window_index = 0;
  double window_start = 0.0;
  MomentPair truth;
};

struct SyntheticData {
  std::vector<FrameSeries> features;
  std::vector<AnnotationTrace> annotations;
  std::vector<GroundTruthWindow> ground_truth;
};

namespace detail {

struct Sinusoid {
  double amp;
  double freq;
  double phase;
  double at(double t) const { return amp * std::sin(2.0 * std::numbers::pi * freq * t + phase); }
};

inline std::vector<Sinusoid> draw_sinusoids(Rng& rng, int n, double amp_lo, double amp_hi, double f_lo, double f_hi) {
  std::vector<Sinusoid> out;
  for (int i = 0; i < n; ++i) {
    const double amp = rng.uniform(amp_lo, amp_hi);
    const double freq = rng.uniform(f_lo, f_hi);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    out.push_back({amp, freq, phase});
  }
  return out;
}

inline double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Stream tags for derive_key.
enum : std::uint64_t { kTagTrajectory = 1, kTagNuisance = 2, kTagMap = 3, kTagNoise = 4, kTagAnnotator = 5, kTagBias = 6 };

}  // namespace detail

/// Latent (mu*, sigma*) at the given times for one subject.
struct LatentTrajectory {
  std::vector<double> mu;
  std::vector<double> sigma;
};

inline LatentTrajectory synthetic_trajectory(const SyntheticConfig& cfg, int subject, const std::vector<double>& times) {
  Rng rng(cfg.seed, {detail::kTagTrajectory, static_cast<std::uint64_t>(subject)});
  const double offset = rng.uniform(-0.6, 0.6);
  const auto mu_waves = detail::draw_sinusoids(rng, 3, 0.5, 1.0, 0.005, 0.04);
  const auto spread_waves = detail::draw_sinusoids(rng, 2, 1.0, 2.0, 0.005, 0.04);
  LatentTrajectory out;
  out.mu.reserve(times.size());
  out.sigma.reserve(times.size());
  for (double t : times) {
    double zm = offset;
    for (const auto& w : mu_waves) zm += w.at(t);
    double zs = 0.0;
    for (const auto& w : spread_waves) zs += w.at(t);
    const double mu = detail::logistic(zm);
    const double spread = cfg.spread_lo + (cfg.spread_hi - cfg.spread_lo) * detail::logistic(zs);
    out.mu.push_back(mu);
    out.sigma.push_back(spread * std::sqrt(mu * (1.0 - mu)));
  }
  return out;
}

/// Generates features, annotator traces and the per-window ground truth
/// (window averages of mu* and sigma*). Output depends only on cfg.
inline SyntheticData generate(const SyntheticConfig& cfg) {
  cfg.validate();
  const std::size_t n_frames = cfg.frames_per_subject();
  std::vector<double> times(n_frames);
  for (std::size_t n = 0; n < n_frames; ++n) times[n] = static_cast<double>(n) / cfg.frame_rate;

  const int input_dim = 2 + cfg.latent_dim;
  std::vector<Eigen::MatrixXd> maps;
  for (int m = 0; m < cfg.n_modalities; ++m) {
    Rng rng(cfg.seed, {detail::kTagMap, static_cast<std::uint64_t>(m)});
    Eigen::MatrixXd w(cfg.feature_dim, input_dim);
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.normal() / std::sqrt(static_cast<double>(input_dim));
    }
    maps.push_back(std::move(w));
  }
  std::vector<double> biases(static_cast<std::size_t>(cfg.n_annotators), 0.0);
  if (cfg.annotator_bias_std > 0.0) {
    for (int a = 0; a < cfg.n_annotators; ++a) {
      Rng rng(cfg.seed, {detail::kTagBias, static_cast<std::uint64_t>(a)});
      biases[static_cast<std::size_t>(a)] = cfg.annotator_bias_std * rng.normal();
    }
  }
  const double rho = std::exp(-1.0 / (cfg.frame_rate * cfg.annotator_persistence));
  const double innovation = std::sqrt(1.0 - rho * rho);

  SyntheticData out;
  for (int s = 0; s < cfg.n_subjects; ++s) {
    const std::string sid = synthetic_subject_id(s);
    const auto latent = synthetic_trajectory(cfg, s, times);

    Rng nuisance_rng(cfg.seed, {detail::kTagNuisance, static_cast<std::uint64_t>(s)});
    std::vector<std::vector<detail::Sinusoid>> nuisance;
    for (int j = 0; j < cfg.latent_dim; ++j) nuisance.push_back(detail::draw_sinusoids(nuisance_rng, 2, 0.5, 1.0, 0.01, 0.2));

    // Rows: frames; columns: standardised [mu*, sigma*] then nuisance.
    Eigen::MatrixXd drivers(static_cast<Eigen::Index>(n_frames), input_dim);
    for (std::size_t n = 0; n < n_frames; ++n) {
      const auto r = static_cast<Eigen::Index>(n);
      if (cfg.identity_map) {
        drivers(r, 0) = latent.mu[n];
        drivers(r, 1) = latent.sigma[n];
      } else {
        drivers(r, 0) = (latent.mu[n] - 0.5) / 0.2;
        drivers(r, 1) = (latent.sigma[n] - 0.12) / 0.05;
      }
      for (int j = 0; j < cfg.latent_dim; ++j) {
        double z = 0.0;
        for (const auto& w : nuisance[static_cast<std::size_t>(j)]) z += w.at(times[n]);
        drivers(r, 2 + j) = z;
      }
    }

    for (int m = 0; m < cfg.n_modalities; ++m) {
      FrameSeries fs;
      fs.subject_id = sid;
      fs.modality = synthetic_modality_name(m);
      fs.timestamps = times;
      if (cfg.identity_map) {
        fs.features = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_frames), cfg.feature_dim);
        const Eigen::Index cols = std::min<Eigen::Index>(cfg.feature_dim, input_dim);
        fs.features.leftCols(cols) = drivers.leftCols(cols);
      } else {
        fs.features = drivers * maps[static_cast<std::size_t>(m)].transpose();
      }
      if (cfg.noise_std > 0.0) {
        Rng noise(cfg.seed, {detail::kTagNoise, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(m)});
        for (Eigen::Index i = 0; i < fs.features.rows(); ++i) {
          for (Eigen::Index j = 0; j < fs.features.cols(); ++j) fs.features(i, j) += cfg.noise_std * noise.normal();
        }
      }
      out.features.push_back(std::move(fs));
    }

    std::vector<BetaParams> shapes;
    shapes.reserve(n_frames);
    for (std::size_t n = 0; n < n_frames; ++n) shapes.push_back(moment_match({latent.mu[n], latent.sigma[n]}));
    for (int a = 0; a < cfg.n_annotators; ++a) {
      Rng rng(cfg.seed, {detail::kTagAnnotator, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(a)});
      AnnotationTrace tr;
      tr.subject_id = sid;
      tr.annotator_id = synthetic_annotator_id(a);
      tr.timestamps = times;
      tr.values.resize(n_frames);
      double z = rng.normal();
      for (std::size_t n = 0; n < n_frames; ++n) {
        if (n > 0) z = rho * z + innovation * rng.normal();
        const double u = std::clamp(0.5 * std::erfc(-z / std::numbers::sqrt2), 1e-12, 1.0 - 1e-12);
        const double v = beta_quantile(shapes[n], u) + biases[static_cast<std::size_t>(a)];
        tr.values[n] = std::clamp(v, 0.0, 1.0);
      }
      out.annotations.push_back(std::move(tr));
    }

    if (n_frames > 0) {
      for (std::int64_t k : enumerate_windows(times.front(), times.back(), cfg.window)) {
        const double start = cfg.window.start(k);
        const auto [b, e] = detail::frames_in_window(times, start, cfg.window.window_len);
        if (e <= b) continue;
        double mu = 0.0;
        double sigma = 0.0;
        for (std::size_t i = b; i < e; ++i) {
          mu += latent.mu[i];
          sigma += latent.sigma[i];
        }
        const auto cnt = static_cast<double>(e - b);
        out.ground_truth.push_back({sid, k, start, {mu / cnt, sigma / cnt}});
      }
    }
  }
  return out;
}

}  // namespace betacons
