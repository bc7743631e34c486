#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "subgmm/common.hpp"
#include "subgmm/geometry.hpp"

namespace subgmm {

struct GaussianComponent {
  double weight = 1.0;       // probability mass, > 0
  Vec3 mean = Vec3::Zero();  // meters
  Mat3 cov = Mat3::Identity();  // meters^2, symmetric positive definite
};

struct GaussianMixture {
  std::vector<GaussianComponent> components;
  // Number of points the mixture was learned from; receivers sample this
  // many points when reconstructing occupancy.
  uint32_t support_size = 0;

  bool empty() const { return components.empty(); }
};

struct EmConfig {
  int components = 100;
  double tol = 1e-4;       // mean log-likelihood improvement, nats
  int max_iters = 100;
  double reg_floor = 1e-6;  // added to covariance diagonals each M-step, m^2
};

struct KeyframePacket {
  GaussianMixture mixture;
  Pose sensor_pose;
  uint8_t robot_id = 0;
  uint32_t sequence = 0;
};

struct KeyframeLedger {
  std::vector<Frustum> frustums;
  double lambda = 0.5;  // overlap fraction threshold in [0, 1]
};

namespace detail {

// Cholesky factor plus cached terms for density evaluation.
struct ComponentEval {
  Eigen::LLT<Mat3> llt;
  double log_norm = 0.0;  // log(weight) - 0.5*log|2*pi*Sigma|

  // Throws DegenerateInput when the covariance is not positive definite.
  void prepare(const GaussianComponent& c) {
    llt.compute(c.cov);
    if (llt.info() != Eigen::Success) {
      throw DegenerateInput("covariance not positive definite");
    }
    const Mat3 L = llt.matrixL();
    double log_det = 0.0;
    for (int i = 0; i < 3; ++i) log_det += 2.0 * std::log(L(i, i));
    log_norm = std::log(c.weight) - 0.5 * (3.0 * std::log(2.0 * M_PI) + log_det);
  }

  double log_weighted_density(const GaussianComponent& c, const Vec3& p) const {
    const Vec3 d = p - c.mean;
    const Vec3 w = llt.matrixL().solve(d);
    return log_norm - 0.5 * w.squaredNorm();
  }
};

inline std::vector<ComponentEval> prepare_evals(const GaussianMixture& g) {
  std::vector<ComponentEval> evals(g.components.size());
  for (size_t m = 0; m < g.components.size(); ++m) {
    evals[m].prepare(g.components[m]);
  }
  return evals;
}

// k-means++ seeding: each successive center drawn with probability
// proportional to squared distance from the nearest chosen center.
inline std::vector<Vec3> kmeanspp_seeds(const std::vector<Vec3>& points,
                                        int k, Rng& rng) {
  const size_t n = points.size();
  std::vector<Vec3> centers;
  centers.reserve(k);
  centers.push_back(points[rng.uniform_index(n)]);
  std::vector<double> d2(n);
  for (size_t i = 0; i < n; ++i) {
    d2[i] = (points[i] - centers[0]).squaredNorm();
  }
  while (int(centers.size()) < k) {
    double total = 0.0;
    for (double v : d2) total += v;
    size_t pick;
    if (total <= 0.0) {
      pick = rng.uniform_index(n);
    } else {
      double target = rng.uniform() * total;
      pick = n - 1;
      for (size_t i = 0; i < n; ++i) {
        target -= d2[i];
        if (target <= 0.0) {
          pick = i;
          break;
        }
      }
    }
    centers.push_back(points[pick]);
    for (size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (points[i] - centers.back()).squaredNorm());
    }
  }
  return centers;
}

}  // namespace detail

inline double log_likelihood(const GaussianMixture& g,
                             const std::vector<Vec3>& points) {
  SUBGMM_CHECK(!points.empty(), BadConfig, "log_likelihood of empty point set");
  const auto evals = detail::prepare_evals(g);
  const size_t M = g.components.size();
  double sum = 0.0;
  std::vector<double> lw(M);
  for (const Vec3& p : points) {
    double max_lw = -std::numeric_limits<double>::infinity();
    for (size_t m = 0; m < M; ++m) {
      lw[m] = evals[m].log_weighted_density(g.components[m], p);
      max_lw = std::max(max_lw, lw[m]);
    }
    double acc = 0.0;
    for (size_t m = 0; m < M; ++m) acc += std::exp(lw[m] - max_lw);
    sum += max_lw + std::log(acc);
  }
  return sum / double(points.size());
}

inline GaussianMixture fit_gmm(const std::vector<Vec3>& points, int M,
                               const EmConfig& cfg, uint64_t seed) {
  SUBGMM_CHECK(M >= 1, BadConfig, "component count must be at least 1");
  if (points.size() < size_t(M)) {
    throw TooFewPoints("need at least as many points as components");
  }
  const size_t n = points.size();

  if (cfg.reg_floor <= 0.0 && M > 1) {
    bool all_same = true;
    for (size_t i = 1; i < n && all_same; ++i) {
      all_same = (points[i] - points[0]).squaredNorm() == 0.0;
    }
    if (all_same) {
      throw DegenerateInput(
          "identical points cannot support multiple components without a "
          "regularization floor");
    }
  }

  Rng rng(seed);
  const std::vector<Vec3> seeds = detail::kmeanspp_seeds(points, M, rng);

  GaussianMixture g;
  g.support_size = uint32_t(n);
  g.components.resize(M);

  // Hard assignment to the nearest seed gives the initial moments.
  {
    std::vector<int> owner(n);
    for (size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int arg = 0;
      for (int m = 0; m < M; ++m) {
        const double d = (points[i] - seeds[m]).squaredNorm();
        if (d < best) {
          best = d;
          arg = m;
        }
      }
      owner[i] = arg;
    }
    std::vector<double> count(M, 0.0);
    std::vector<Vec3> mean(M, Vec3::Zero());
    for (size_t i = 0; i < n; ++i) {
      count[owner[i]] += 1.0;
      mean[owner[i]] += points[i];
    }
    std::vector<Mat3> scatter(M, Mat3::Zero());
    for (int m = 0; m < M; ++m) {
      mean[m] = count[m] > 0.0 ? Vec3(mean[m] / count[m]) : seeds[m];
    }
    for (size_t i = 0; i < n; ++i) {
      const Vec3 d = points[i] - mean[owner[i]];
      scatter[owner[i]] += d * d.transpose();
    }
    for (int m = 0; m < M; ++m) {
      auto& c = g.components[m];
      c.weight = std::max(count[m], 1.0) / double(n);
      c.mean = mean[m];
      c.cov = count[m] > 0.0 ? Mat3(scatter[m] / count[m]) : Mat3::Zero();
      c.cov += std::max(cfg.reg_floor, 0.0) * Mat3::Identity();
    }
    double wsum = 0.0;
    for (const auto& c : g.components) wsum += c.weight;
    for (auto& c : g.components) c.weight /= wsum;
  }

  std::vector<double> resp(n * M);
  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    // E-step, accumulating the mean log-likelihood of the current params.
    const auto evals = detail::prepare_evals(g);
    double ll = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double* r = &resp[i * M];
      double max_lw = -std::numeric_limits<double>::infinity();
      for (int m = 0; m < M; ++m) {
        r[m] = evals[m].log_weighted_density(g.components[m], points[i]);
        max_lw = std::max(max_lw, r[m]);
      }
      double acc = 0.0;
      for (int m = 0; m < M; ++m) {
        r[m] = std::exp(r[m] - max_lw);
        acc += r[m];
      }
      for (int m = 0; m < M; ++m) r[m] /= acc;
      ll += max_lw + std::log(acc);
    }
    ll /= double(n);

    // EM cannot decrease the likelihood; allow only rounding noise.
    SUBGMM_CHECK(ll >= prev_ll - 1e-9 * (1.0 + std::abs(prev_ll)),
                 DegenerateInput, "log-likelihood decreased");
    const bool converged = iter > 0 && (ll - prev_ll) < cfg.tol;
    prev_ll = ll;
    if (converged) break;

    // M-step with the regularization floor on the diagonal.
    for (int m = 0; m < M; ++m) {
      double nk = 0.0;
      Vec3 mu = Vec3::Zero();
      for (size_t i = 0; i < n; ++i) {
        nk += resp[i * M + m];
        mu += resp[i * M + m] * points[i];
      }
      auto& c = g.components[m];
      if (nk < 1e-12 * double(n)) {
        // Starved component: keep its params, only the weight shrinks.
        c.weight = std::max(nk / double(n), 1e-300);
        continue;
      }
      mu /= nk;
      Mat3 cov = Mat3::Zero();
      for (size_t i = 0; i < n; ++i) {
        const Vec3 d = points[i] - mu;
        cov += resp[i * M + m] * (d * d.transpose());
      }
      cov /= nk;
      cov += std::max(cfg.reg_floor, 0.0) * Mat3::Identity();
      c.weight = nk / double(n);
      c.mean = mu;
      c.cov = cov;
    }
    double wsum = 0.0;
    for (const auto& c : g.components) wsum += c.weight;
    for (auto& c : g.components) c.weight /= wsum;
  }
  return g;
}

inline GaussianMixture transform_gmm(const GaussianMixture& g, const Mat3& R,
                                     const Vec3& x) {
  GaussianMixture out = g;
  for (auto& c : out.components) {
    c.mean = R * c.mean + x;
    c.cov = R * c.cov * R.transpose();
  }
  return out;
}

// Weights are re-scaled by support sizes so that resampling the merged map
// reproduces both fragments' point mass proportionally.
inline GaussianMixture merge_into(const GaussianMixture& map,
                                  const GaussianMixture& incoming) {
  if (map.empty()) return incoming;
  if (incoming.empty()) return map;
  GaussianMixture out;
  out.support_size = map.support_size + incoming.support_size;
  out.components.reserve(map.components.size() + incoming.components.size());
  const double wa = double(map.support_size);
  const double wb = double(incoming.support_size);
  for (const auto& c : map.components) {
    out.components.push_back(c);
    out.components.back().weight = c.weight * wa;
  }
  for (const auto& c : incoming.components) {
    out.components.push_back(c);
    out.components.back().weight = c.weight * wb;
  }
  double total = 0.0;
  for (const auto& c : out.components) total += c.weight;
  for (auto& c : out.components) c.weight /= total;
  return out;
}

inline std::vector<Vec3> sample_gmm(const GaussianMixture& g, size_t n,
                                    uint64_t seed) {
  SUBGMM_CHECK(!g.empty(), BadConfig, "cannot sample an empty mixture");
  Rng rng(seed);
  const size_t M = g.components.size();
  std::vector<Eigen::LLT<Mat3>> llts(M);
  std::vector<double> cdf(M);
  double acc = 0.0;
  for (size_t m = 0; m < M; ++m) {
    llts[m].compute(g.components[m].cov);
    if (llts[m].info() != Eigen::Success) {
      throw DegenerateInput("covariance not positive definite");
    }
    acc += g.components[m].weight;
    cdf[m] = acc;
  }
  std::vector<Vec3> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const double u = rng.uniform() * acc;
    const size_t m =
        std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin();
    const size_t mm = std::min(m, M - 1);
    const Vec3 z = rng.normal3();
    out.push_back(g.components[mm].mean +
                  Mat3(llts[mm].matrixL()) * z);
  }
  return out;
}

// A candidate is a keyframe when no accepted keyframe's overlap with it
// reaches the fraction lambda of the candidate's own volume. The caller
// appends accepted candidates to the ledger.
inline bool is_keyframe(const Frustum& candidate, const KeyframeLedger& ledger) {
  const double vol = frustum_volume(candidate);
  for (const Frustum& k : ledger.frustums) {
    if (frustum_overlap_volume(candidate, k) / vol >= ledger.lambda) {
      return false;
    }
  }
  return true;
}

}  // namespace subgmm
