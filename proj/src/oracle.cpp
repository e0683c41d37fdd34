#include "occusafe/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace occusafe {
namespace oracle {

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double kA21 = 1.0 / 5;
constexpr double kA31 = 3.0 / 40, kA32 = 9.0 / 40;
constexpr double kA41 = 44.0 / 45, kA42 = -56.0 / 15, kA43 = 32.0 / 9;
constexpr double kA51 = 19372.0 / 6561, kA52 = -25360.0 / 2187,
                 kA53 = 64448.0 / 6561, kA54 = -212.0 / 729;
constexpr double kA61 = 9017.0 / 3168, kA62 = -355.0 / 33,
                 kA63 = 46732.0 / 5247, kA64 = 49.0 / 176,
                 kA65 = -5103.0 / 18656;
constexpr double kB1 = 35.0 / 384, kB3 = 500.0 / 1113, kB4 = 125.0 / 192,
                 kB5 = -2187.0 / 6784, kB6 = 11.0 / 84;
constexpr double kC2 = 1.0 / 5, kC3 = 3.0 / 10, kC4 = 4.0 / 5, kC5 = 8.0 / 9;
// Difference between the fifth and embedded fourth order weights.
constexpr double kE1 = 71.0 / 57600, kE3 = -71.0 / 16695, kE4 = 71.0 / 1920,
                 kE5 = -17253.0 / 339200, kE6 = 22.0 / 525, kE7 = -1.0 / 40;

void eval_dynamics(const std::vector<Polynomial>& f, double t,
                   const std::vector<double>& x, std::vector<double>& out) {
  const int n = static_cast<int>(x.size());
  thread_local std::vector<double> point;
  point.assign(1 + n, 0.0);
  point[0] = t;
  for (int i = 0; i < n; ++i) point[1 + i] = x[i];
  out.resize(n);
  for (int i = 0; i < n; ++i) out[i] = f[i].evaluate(point);
}

bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

bool point_unsafe(const std::vector<Polynomial>& unsafe_set, double t,
                  const std::vector<double>& x) {
  const int n = static_cast<int>(x.size());
  thread_local std::vector<double> point;
  point.assign(1 + n, 0.0);
  point[0] = t;
  for (int i = 0; i < n; ++i) point[1 + i] = x[i];
  for (const Polynomial& g : unsafe_set) {
    if (g.evaluate(point) < 0.0) return false;
  }
  return true;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<double> Trajectory::state_at(double t) const {
  if (times.empty()) throw std::logic_error("state_at on empty trajectory");
  if (t <= times.front()) return states.front();
  if (t >= times.back()) return states.back();
  const auto it = std::upper_bound(times.begin(), times.end(), t);
  const std::size_t k = static_cast<std::size_t>(it - times.begin()) - 1;
  const double h = times[k + 1] - times[k];
  const double s = (t - times[k]) / h;
  const double s2 = s * s, s3 = s2 * s;
  const double h00 = 2 * s3 - 3 * s2 + 1;
  const double h10 = s3 - 2 * s2 + s;
  const double h01 = -2 * s3 + 3 * s2;
  const double h11 = s3 - s2;
  const std::size_t n = states[k].size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = h00 * states[k][i] + h10 * h * derivs[k][i] +
             h01 * states[k + 1][i] + h11 * h * derivs[k + 1][i];
  }
  return out;
}

Trajectory integrate(const std::vector<Polynomial>& dynamics,
                     const std::vector<double>& x0, double t0, double t1,
                     const IntegratorOptions& opts) {
  Trajectory traj;
  const int n = static_cast<int>(x0.size());
  if (static_cast<int>(dynamics.size()) != n) {
    traj.failure = "dynamics dimension does not match the state";
    return traj;
  }
  if (!(t1 > t0)) {
    traj.failure = "time span is empty";
    return traj;
  }
  const double span = t1 - t0;
  const double max_step = opts.max_step > 0.0 ? opts.max_step : span / 1000.0;

  std::vector<double> x = x0, k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n);
  std::vector<double> stage(n), x_new(n), err(n);
  double t = t0;
  eval_dynamics(dynamics, t, x, k1);

  traj.times.push_back(t);
  traj.states.push_back(x);
  traj.derivs.push_back(k1);

  double h = std::min(max_step, span * 1e-3);
  long steps = 0;
  while (t < t1) {
    if (++steps > opts.max_steps) {
      traj.failure = "step limit exceeded";
      return traj;
    }
    h = std::min(h, t1 - t);
    if (h < 16.0 * std::numeric_limits<double>::epsilon() * std::abs(t1)) {
      traj.failure = "step size underflow";
      return traj;
    }

    for (int i = 0; i < n; ++i) stage[i] = x[i] + h * kA21 * k1[i];
    eval_dynamics(dynamics, t + kC2 * h, stage, k2);
    for (int i = 0; i < n; ++i) {
      stage[i] = x[i] + h * (kA31 * k1[i] + kA32 * k2[i]);
    }
    eval_dynamics(dynamics, t + kC3 * h, stage, k3);
    for (int i = 0; i < n; ++i) {
      stage[i] = x[i] + h * (kA41 * k1[i] + kA42 * k2[i] + kA43 * k3[i]);
    }
    eval_dynamics(dynamics, t + kC4 * h, stage, k4);
    for (int i = 0; i < n; ++i) {
      stage[i] = x[i] + h * (kA51 * k1[i] + kA52 * k2[i] + kA53 * k3[i] +
                             kA54 * k4[i]);
    }
    eval_dynamics(dynamics, t + kC5 * h, stage, k5);
    for (int i = 0; i < n; ++i) {
      stage[i] = x[i] + h * (kA61 * k1[i] + kA62 * k2[i] + kA63 * k3[i] +
                             kA64 * k4[i] + kA65 * k5[i]);
    }
    eval_dynamics(dynamics, t + h, stage, k6);
    for (int i = 0; i < n; ++i) {
      x_new[i] = x[i] + h * (kB1 * k1[i] + kB3 * k3[i] + kB4 * k4[i] +
                             kB5 * k5[i] + kB6 * k6[i]);
    }
    eval_dynamics(dynamics, t + h, x_new, k7);

    if (!all_finite(x_new) || !all_finite(k7)) {
      traj.failure = "state is no longer finite (trajectory may escape)";
      return traj;
    }

    double err_norm = 0.0;
    for (int i = 0; i < n; ++i) {
      const double e = h * (kE1 * k1[i] + kE3 * k3[i] + kE4 * k4[i] +
                            kE5 * k5[i] + kE6 * k6[i] + kE7 * k7[i]);
      const double tol = opts.abs_tol +
                         opts.rel_tol *
                             std::max(std::abs(x[i]), std::abs(x_new[i]));
      err_norm += (e / tol) * (e / tol);
    }
    err_norm = std::sqrt(err_norm / n);

    if (err_norm <= 1.0) {
      t += h;
      x = x_new;
      k1 = k7;  // first stage of the next step equals the last of this one
      traj.times.push_back(t);
      traj.states.push_back(x);
      traj.derivs.push_back(k1);
      ++traj.accepted;
    } else {
      ++traj.rejected;
    }
    const double factor = err_norm > 0.0
                              ? 0.9 * std::pow(err_norm, -0.2)
                              : 5.0;
    h = std::min(max_step, h * std::clamp(factor, 0.2, 5.0));
  }
  return traj;
}

std::vector<std::pair<double, double>> unsafe_intervals(
    const Trajectory& traj, const std::vector<Polynomial>& unsafe_set,
    double refine_tol) {
  std::vector<std::pair<double, double>> out;
  if (!traj.ok() || traj.times.size() < 2) return out;

  auto unsafe_at = [&](double t) {
    return point_unsafe(unsafe_set, t, traj.state_at(t));
  };

  std::vector<double> grid;
  grid.reserve(5 * traj.times.size());
  for (std::size_t k = 0; k + 1 < traj.times.size(); ++k) {
    const double a = traj.times[k], b = traj.times[k + 1];
    grid.push_back(a);
    for (int j = 1; j <= 4; ++j) grid.push_back(a + (b - a) * j / 5.0);
  }
  grid.push_back(traj.times.back());

  std::vector<char> flag(grid.size());
  for (std::size_t j = 0; j < grid.size(); ++j) flag[j] = unsafe_at(grid[j]);

  auto bisect = [&](double lo, double hi, bool lo_flag) {
    while (hi - lo > refine_tol) {
      const double mid = 0.5 * (lo + hi);
      if (unsafe_at(mid) == lo_flag) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    return 0.5 * (lo + hi);
  };

  double open = flag[0] ? grid[0] : std::numeric_limits<double>::quiet_NaN();
  for (std::size_t j = 0; j + 1 < grid.size(); ++j) {
    if (flag[j] == flag[j + 1]) continue;
    const double c = bisect(grid[j], grid[j + 1], flag[j]);
    if (std::isnan(open)) {
      open = c;
    } else {
      out.emplace_back(open, c);
      open = std::numeric_limits<double>::quiet_NaN();
    }
  }
  if (!std::isnan(open)) out.emplace_back(open, grid.back());
  return out;
}

double time_in_unsafe(const Trajectory& traj,
                      const std::vector<Polynomial>& unsafe_set,
                      double refine_tol) {
  double total = 0.0;
  for (const auto& [a, b] : unsafe_intervals(traj, unsafe_set, refine_tol)) {
    total += b - a;
  }
  return total;
}

double weighted_time_in_unsafe(const Trajectory& traj,
                               const std::vector<Polynomial>& unsafe_set,
                               const Polynomial& objective,
                               double refine_tol) {
  const bool unit_weight =
      objective.degree() == 0 &&
      std::abs(objective.evaluate(std::vector<double>(
                   objective.num_slots(), 0.0)) - 1.0) < 1e-15;
  if (unit_weight) return time_in_unsafe(traj, unsafe_set, refine_tol);

  const int n = static_cast<int>(traj.states.front().size());
  std::vector<double> point(1 + n, 0.0);
  auto weight = [&](double t) {
    const auto x = traj.state_at(t);
    point[0] = t;
    for (int i = 0; i < n; ++i) point[1 + i] = x[i];
    return objective.evaluate(point);
  };

  double total = 0.0;
  for (const auto& [a, b] : unsafe_intervals(traj, unsafe_set, refine_tol)) {
    // Composite Simpson, 64 panels per interval.
    const int panels = 64;
    const double h = (b - a) / (2 * panels);
    double sum = weight(a) + weight(b);
    for (int j = 1; j < 2 * panels; ++j) {
      sum += (j % 2 == 1 ? 4.0 : 2.0) * weight(a + j * h);
    }
    total += sum * h / 3.0;
  }
  return total;
}

TimeEstimate expected_time(const problem::SafetyProblem& p, int samples,
                           std::uint64_t seed, const IntegratorOptions& opts,
                           double refine_tol) {
  TimeEstimate est;
  auto run_one = [&](const std::vector<double>& x0) {
    const Trajectory traj =
        integrate(p.dynamics, x0, 0.0, p.horizon, opts);
    if (!traj.ok()) {
      if (est.failure.empty()) est.failure = traj.failure;
      return 0.0;
    }
    est.total_accepted += traj.accepted;
    return weighted_time_in_unsafe(traj, p.unsafe_set, p.objective,
                                   refine_tol);
  };

  if (const auto* d = std::get_if<problem::DiracInitial>(&p.initial)) {
    est.mean = run_one(d->point);
    est.samples = 1;
    est.std_error = 0.0;
    return est;
  }
  const auto* u = std::get_if<problem::UniformBoxInitial>(&p.initial);
  if (u == nullptr) {
    throw std::invalid_argument(
        "expected_time: a raw moment initial distribution cannot be "
        "sampled");
  }
  if (samples < 1) {
    throw std::invalid_argument("expected_time: need at least one sample");
  }
  const int n = static_cast<int>(u->lo.size());
  std::vector<double> values;
  values.reserve(samples);
  std::vector<double> x0(n);
  for (int i = 0; i < samples; ++i) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    for (int j = 0; j < n; ++j) {
      std::uniform_real_distribution<double> dist(u->lo[j], u->hi[j]);
      x0[j] = dist(rng);
    }
    values.push_back(run_one(x0));
    if (!est.failure.empty()) return est;
  }
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= samples;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  est.mean = mean;
  est.samples = samples;
  est.std_error =
      samples > 1 ? std::sqrt(var / (static_cast<double>(samples) *
                                     (samples - 1)))
                  : 0.0;
  return est;
}

moments::MomentVector empirical_moments(const Trajectory& traj, int degree,
                                        int num_points) {
  if (!traj.ok() || traj.times.size() < 2) {
    throw std::invalid_argument("empirical_moments: trajectory is unusable");
  }
  if (num_points < 3) num_points = 3;
  if (num_points % 2 == 0) ++num_points;  // Simpson needs an even panel count

  const int n = static_cast<int>(traj.states.front().size());
  moments::MomentVector m(1 + n, degree);
  const auto& basis = m.basis();

  const double a = traj.t0(), b = traj.t1();
  const double h = (b - a) / (num_points - 1);
  std::vector<std::vector<double>> powers(1 + n,
                                          std::vector<double>(degree + 1));
  for (int j = 0; j < num_points; ++j) {
    const double t = a + j * h;
    const auto x = traj.state_at(t);
    for (int v = 0; v <= n; ++v) {
      const double base = v == 0 ? t : x[v - 1];
      powers[v][0] = 1.0;
      for (int k = 1; k <= degree; ++k) powers[v][k] = powers[v][k - 1] * base;
    }
    const double w = (j == 0 || j == num_points - 1)
                         ? 1.0
                         : (j % 2 == 1 ? 4.0 : 2.0);
    for (std::size_t e = 0; e < basis.size(); ++e) {
      double mono = 1.0;
      const auto& exp = basis[e];
      for (int v = 0; v <= n; ++v) {
        if (exp[v] != 0) mono *= powers[v][exp[v]];
      }
      m.values[e] += w * mono;
    }
  }
  for (double& v : m.values) v *= h / 3.0;
  return m;
}

}  // namespace oracle
}  // namespace occusafe
