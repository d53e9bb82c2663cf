#include "clm/scaling.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include <fmt/format.h>

namespace clm {

double to_lower_is_better(double value, TaskKind kind) {
  if (kind == TaskKind::regression) return value;
  if (!(value >= 0.0 && value <= 1.0)) throw std::invalid_argument(fmt::format("ROC-AUC {} is outside [0, 1]", value));
  return 1.0 - value;
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && v[order[j]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

double spearman_rho(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman_rho: series lengths differ");
  if (x.size() < 3) throw std::invalid_argument("spearman_rho needs at least 3 points");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw std::invalid_argument("spearman_rho: non-finite value");
  }
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double mean = 0.5 * static_cast<double>(x.size() + 1);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("spearman_rho: constant series");
  return sxy / std::sqrt(sxx * syy);
}

double huber(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

double ScalingFit::A() const { return std::exp(a); }
double ScalingFit::B() const { return std::exp(b); }
double ScalingFit::E() const { return std::exp(e); }

ScalingFit ScalingFit::from_linear(double A, double B, double E, double alpha, double beta) {
  ScalingFit f;
  f.a = std::log(A);  // log 0 = -inf drops the term
  f.b = std::log(B);
  f.e = std::log(E);
  f.alpha = alpha;
  f.beta = beta;
  return f;
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// log-sum-exp of three terms, with softmax weights when requested.
double lse3(const std::array<double, 3>& t, std::array<double, 3>* w = nullptr) {
  const double m = std::max({t[0], t[1], t[2]});
  if (m == kNegInf) {
    if (w) *w = {0, 0, 0};
    return kNegInf;
  }
  double s = 0;
  std::array<double, 3> ex{};
  for (int i = 0; i < 3; ++i) {
    ex[i] = t[i] == kNegInf ? 0.0 : std::exp(t[i] - m);
    s += ex[i];
  }
  if (w) {
    for (int i = 0; i < 3; ++i) (*w)[i] = ex[i] / s;
  }
  return m + std::log(s);
}

void check_point(double n, double d) {
  if (!(n >= 1.0) || !(d >= 1.0)) throw std::invalid_argument(fmt::format("scaling point needs N, D >= 1 (got {}, {})", n, d));
}

}  // namespace

double log_predict_loss(const ScalingFit& f, double n, double d) {
  check_point(n, d);
  return lse3({f.a - f.alpha * std::log(n), f.b - f.beta * std::log(d), f.e});
}

double predict_loss(const ScalingFit& f, double n, double d) { return std::exp(log_predict_loss(f, n, d)); }

double r_squared(std::span<const double> obs, std::span<const double> pred) {
  if (obs.size() != pred.size() || obs.size() < 2) throw std::invalid_argument("r_squared needs two equal-length series");
  const double mean = std::accumulate(obs.begin(), obs.end(), 0.0) / static_cast<double>(obs.size());
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    ss_res += (obs[i] - pred[i]) * (obs[i] - pred[i]);
    ss_tot += (obs[i] - mean) * (obs[i] - mean);
  }
  if (ss_tot == 0.0) throw std::invalid_argument("r_squared: observations are constant");
  return 1.0 - ss_res / ss_tot;
}

double scaling_objective(std::span<const ScalingPoint> points, const double* th, double delta, double* grad) {
  double f = 0;
  if (grad) std::fill(grad, grad + 5, 0.0);
  for (const auto& p : points) {
    const double ln = std::log(p.n), ld = std::log(p.d);
    std::array<double, 3> w{};
    const double lhat = lse3({th[0] - th[3] * ln, th[1] - th[4] * ld, th[2]}, &w);
    const double r = lhat - std::log(p.loss);
    f += huber(r, delta);
    if (grad) {
      const double h = std::abs(r) <= delta ? r : std::copysign(delta, r);
      grad[0] += h * w[0];
      grad[1] += h * w[1];
      grad[2] += h * w[2];
      grad[3] -= h * w[0] * ln;
      grad[4] -= h * w[1] * ld;
    }
  }
  return f;
}

namespace {

using Vec5 = std::array<double, 5>;

double dot(const Vec5& a, const Vec5& b) {
  double s = 0;
  for (int i = 0; i < 5; ++i) s += a[i] * b[i];
  return s;
}

struct Minimum {
  Vec5 x;
  double f;
  bool converged;
};

// L-BFGS (memory 10) with a backtracking Armijo line search.
Minimum lbfgs(std::span<const ScalingPoint> pts, Vec5 x, double delta, std::size_t max_iter, double tol) {
  Vec5 g;
  double f = scaling_objective(pts, x.data(), delta, g.data());
  std::deque<std::pair<Vec5, Vec5>> mem;
  for (std::size_t it = 0; it < max_iter; ++it) {
    if (!std::isfinite(f)) return {x, f, false};
    if (std::sqrt(dot(g, g)) <= tol) return {x, f, true};
    // Two-loop recursion.
    Vec5 q = g;
    std::vector<double> alpha(mem.size());
    for (std::size_t k = mem.size(); k-- > 0;) {
      const auto& [s, y] = mem[k];
      alpha[k] = dot(s, q) / dot(y, s);
      for (int i = 0; i < 5; ++i) q[i] -= alpha[k] * y[i];
    }
    double gamma = 1.0;
    if (!mem.empty()) gamma = dot(mem.back().first, mem.back().second) / dot(mem.back().second, mem.back().second);
    else gamma = 1.0 / std::max(1.0, std::sqrt(dot(g, g)));
    for (auto& v : q) v *= gamma;
    for (std::size_t k = 0; k < mem.size(); ++k) {
      const auto& [s, y] = mem[k];
      const double beta = dot(y, q) / dot(y, s);
      for (int i = 0; i < 5; ++i) q[i] += s[i] * (alpha[k] - beta);
    }
    Vec5 dir;
    for (int i = 0; i < 5; ++i) dir[i] = -q[i];
    double slope = dot(g, dir);
    if (slope >= 0) {  // not a descent direction: restart from steepest descent
      mem.clear();
      for (int i = 0; i < 5; ++i) dir[i] = -g[i] / std::max(1.0, std::sqrt(dot(g, g)));
      slope = dot(g, dir);
    }
    double step = 1.0;
    Vec5 xn, gn;
    double fn = 0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      for (int i = 0; i < 5; ++i) xn[i] = x[i] + step * dir[i];
      fn = scaling_objective(pts, xn.data(), delta, gn.data());
      if (std::isfinite(fn) && fn <= f + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) return {x, f, std::sqrt(dot(g, g)) <= tol};
    Vec5 s, y;
    for (int i = 0; i < 5; ++i) {
      s[i] = xn[i] - x[i];
      y[i] = gn[i] - g[i];
    }
    if (dot(s, y) > 1e-300) {
      mem.emplace_back(s, y);
      if (mem.size() > 10) mem.pop_front();
    }
    x = xn;
    g = gn;
    f = fn;
  }
  return {x, f, std::sqrt(dot(g, g)) <= tol};
}

// For fixed exponents and floor, L - E = A N^-alpha + B D^-beta is linear in
// (A, B); solve the 2x2 normal equations and clamp to positive values.
std::pair<double, double> warm_start(std::span<const ScalingPoint> pts, double alpha, double beta, double E) {
  double s11 = 0, s12 = 0, s22 = 0, r1 = 0, r2 = 0;
  for (const auto& p : pts) {
    const double u = std::pow(p.n, -alpha), v = std::pow(p.d, -beta), t = p.loss - E;
    s11 += u * u;
    s12 += u * v;
    s22 += v * v;
    r1 += u * t;
    r2 += v * t;
  }
  const double det = s11 * s22 - s12 * s12;
  double A = 0, B = 0;
  if (std::abs(det) > 1e-300 * std::max(1.0, s11 * s22)) {
    A = (r1 * s22 - r2 * s12) / det;
    B = (s11 * r2 - s12 * r1) / det;
  }
  const double floor = 1e-8;
  return {std::log(std::max(A, floor)), std::log(std::max(B, floor))};
}

}  // namespace

ScalingFit fit_scaling_law(std::span<const ScalingPoint> points, const FitOptions& options) {
  if (points.size() < 6) throw std::invalid_argument("fit_scaling_law needs at least 6 points");
  std::set<double> ns, ds;
  for (const auto& p : points) {
    check_point(p.n, p.d);
    if (!(p.loss > 0) || !std::isfinite(p.loss)) throw std::invalid_argument("fit_scaling_law: loss must be positive");
    ns.insert(p.n);
    ds.insert(p.d);
  }
  if (ns.size() < 2 || ds.size() < 2) {
    throw std::invalid_argument("fit_scaling_law needs at least 2 distinct N and 2 distinct D values");
  }
  const std::vector<double> e_grid =
      options.log_e_grid.empty() ? std::vector<double>{std::log(0.01), std::log(0.1), std::log(1.0)} : options.log_e_grid;
  std::vector<double> obs;
  for (const auto& p : points) obs.push_back(std::log(p.loss));

  ScalingFit best;
  bool have = false;
  for (double delta : options.deltas) {
    if (!(delta > 0)) throw std::invalid_argument("huber delta must be positive");
    bool found = false;
    Minimum m_best{};
    for (double al : options.exponent_grid) {
      for (double be : options.exponent_grid) {
        for (double e0 : e_grid) {
          const auto [a0, b0] = warm_start(points, al, be, std::exp(e0));
          const auto m = lbfgs(points, {a0, b0, e0, al, be}, delta, options.max_iterations, options.gradient_tolerance);
          if (!m.converged) continue;
          const bool better = !found || m.f < m_best.f ||
                              (m.f == m_best.f && m.x[3] + m.x[4] < m_best.x[3] + m_best.x[4]);
          if (better) {
            m_best = m;
            found = true;
          }
        }
      }
    }
    if (!found) continue;
    ScalingFit fit{m_best.x[0], m_best.x[1], m_best.x[2], m_best.x[3], m_best.x[4], delta, 0.0, m_best.f};
    std::vector<double> pred;
    for (const auto& p : points) pred.push_back(log_predict_loss(fit, p.n, p.d));
    fit.r_squared = r_squared(obs, pred);
    if (!have || fit.r_squared > best.r_squared) {
      best = fit;
      have = true;
    }
  }
  if (!have) throw std::runtime_error("fit_scaling_law: no start converged for any delta");
  return best;
}

ComputeBudget pf_days(double n, double d_train) {
  if (!(n >= 0) || !(d_train >= 0)) throw std::invalid_argument("pf_days needs N, D >= 0");
  ComputeBudget c{n, d_train, 6.0 * n * d_train, 0.0};
  c.pf_days = c.flops_total / (1e15 * 86400.0);
  return c;
}

std::vector<ScalingPoint> parse_scaling_points(const CsvTable& table) {
  const std::size_t cn = table.column("N"), cd = table.column("D"), cl = table.column("loss");
  std::vector<ScalingPoint> out;
  for (const auto& row : table.rows) {
    try {
      out.push_back({std::stod(row[cn]), std::stod(row[cd]), std::stod(row[cl])});
    } catch (const std::logic_error&) {
      throw std::invalid_argument("scaling points: non-numeric row " + std::to_string(out.size() + 2));
    }
  }
  return out;
}

std::string fit_report(const ScalingFit& f, std::size_t n_points) {
  return fmt::format(
      "A = {}\nB = {}\nE = {}\nalpha = {}\nbeta = {}\ndelta = {}\nr_squared = {}\nobjective = {}\nn_points = {}\n",
      f.A(), f.B(), f.E(), f.alpha, f.beta, f.delta, f.r_squared, f.objective, n_points);
}

std::vector<ConsistencyRow> consistency_from_metrics(const CsvTable& metrics, const std::string& axis) {
  const std::size_t c_id = metrics.column("checkpoint_id"), c_pre = metrics.column("l_pre"),
                    c_task = metrics.column("task"), c_down = metrics.column("l_down"),
                    c_mode = metrics.column("mode"), c_metric = metrics.column("metric_name"),
                    c_val = metrics.column("value");
  std::vector<std::string> ckpts;  // first-appearance order
  std::map<std::string, double> l_pre;
  struct Cell {
    double l_down = 0;
    std::map<std::string, std::pair<double, std::size_t>> sums;  // mode -> (sum, count)
  };
  std::map<std::string, std::map<std::string, Cell>> by_task;  // task -> checkpoint -> cell
  for (const auto& row : metrics.rows) {
    const auto& id = row[c_id];
    if (!l_pre.count(id)) {
      ckpts.push_back(id);
      l_pre[id] = std::stod(row[c_pre]);
    }
    auto& cell = by_task[row[c_task]][id];
    cell.l_down = std::stod(row[c_down]);
    const TaskKind kind = row[c_metric] == "roc_auc" ? TaskKind::classification : TaskKind::regression;
    auto& s = cell.sums[row[c_mode]];
    s.first += to_lower_is_better(std::stod(row[c_val]), kind);
    s.second += 1;
  }
  std::vector<ConsistencyRow> out;
  for (const auto& [task, cells] : by_task) {
    std::set<std::string> modes;
    for (const auto& [id, cell] : cells) {
      for (const auto& [m, s] : cell.sums) modes.insert(m);
    }
    auto emit = [&](const std::string& mode, auto&& value_of) {
      std::vector<double> x, y;
      for (const auto& id : ckpts) {
        auto it = cells.find(id);
        if (it == cells.end()) continue;
        double v = 0;
        if (!value_of(it->second, v)) continue;
        x.push_back(l_pre.at(id));
        y.push_back(v);
      }
      double rho = std::numeric_limits<double>::quiet_NaN();
      try {
        rho = spearman_rho(x, y);
      } catch (const std::invalid_argument&) {
        // fewer than 3 checkpoints or a constant series: undefined
      }
      out.push_back({task, axis, mode, rho, x.size()});
    };
    for (const auto& mode : modes) {
      emit(mode, [&](const Cell& c, double& v) {
        auto it = c.sums.find(mode);
        if (it == c.sums.end()) return false;
        v = it->second.first / static_cast<double>(it->second.second);
        return true;
      });
    }
    emit("l_down", [](const Cell& c, double& v) {
      v = c.l_down;
      return true;
    });
  }
  return out;
}

}  // namespace clm
