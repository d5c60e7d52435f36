#include "ddeq/diagnostics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>

namespace ddeq {

namespace {

std::vector<std::vector<double>> sq_cost_matrix(const Tensor& a,
                                                const Tensor& b) {
  std::vector<std::vector<double>> c(a.rows(), std::vector<double>(b.rows()));
  for (int64_t i = 0; i < a.rows(); ++i)
    for (int64_t j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < a.cols(); ++k) {
        double diff = a(i, k) - b(j, k);
        s += diff * diff;
      }
      c[i][j] = s;
    }
  return c;
}

// O(n^3) Hungarian algorithm with potentials; returns the minimum total cost
// of a perfect assignment.
double hungarian_cost(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> match(n + 1, 0);  // column -> row (1-based)
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    std::vector<int> way(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = match[j0], j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0.0;
  for (int j = 1; j <= n; ++j) total += cost[match[j] - 1][j - 1];
  return total;
}

// Exact transportation problem on a complete bipartite graph with integer
// supplies/demands, via successive shortest paths with node potentials.
// Nodes 0..n-1 are suppliers, n..n+m-1 consumers. Reduced costs stay
// non-negative up to rounding, which is clamped away for Dijkstra.
double transport_cost(const std::vector<std::vector<double>>& cost,
                      std::vector<int64_t> supply, std::vector<int64_t> demand) {
  const int n = static_cast<int>(supply.size());
  const int m = static_cast<int>(demand.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::vector<int64_t>> flow(n, std::vector<int64_t>(m, 0));
  std::vector<double> pi(n + m, 0.0);
  int64_t remaining = std::accumulate(supply.begin(), supply.end(), int64_t{0});

  while (remaining > 0) {
    std::vector<double> dist(n + m, inf);
    std::vector<int> prev(n + m, -1);
    using QE = std::pair<double, int>;
    std::priority_queue<QE, std::vector<QE>, std::greater<>> pq;
    for (int i = 0; i < n; ++i)
      if (supply[i] > 0) {
        dist[i] = 0.0;
        pq.emplace(0.0, i);
      }
    while (!pq.empty()) {
      auto [d, u] = pq.top();
      pq.pop();
      if (d > dist[u]) continue;
      if (u < n) {
        for (int j = 0; j < m; ++j) {
          double rc = std::max(0.0, cost[u][j] + pi[u] - pi[n + j]);
          if (dist[u] + rc < dist[n + j]) {
            dist[n + j] = dist[u] + rc;
            prev[n + j] = u;
            pq.emplace(dist[n + j], n + j);
          }
        }
      } else {
        int j = u - n;
        for (int i = 0; i < n; ++i) {
          if (flow[i][j] <= 0) continue;  // residual arc j -> i
          double rc = std::max(0.0, -cost[i][j] + pi[u] - pi[i]);
          if (dist[u] + rc < dist[i]) {
            dist[i] = dist[u] + rc;
            prev[i] = u;
            pq.emplace(dist[i], i);
          }
        }
      }
    }
    int best = -1;
    for (int j = 0; j < m; ++j)
      if (demand[j] > 0 && dist[n + j] < inf &&
          (best < 0 || dist[n + j] < dist[n + best]))
        best = j;
    if (best < 0) throw Error("transport: no augmenting path");

    int64_t push = demand[best];
    int src = n + best;
    for (int v = n + best; prev[v] != -1; v = prev[v]) {
      int u = prev[v];
      if (v < n) push = std::min(push, flow[v][u - n]);  // backward arc
      src = u;
    }
    push = std::min(push, supply[src]);
    for (int v = n + best; prev[v] != -1; v = prev[v]) {
      int u = prev[v];
      if (v >= n)
        flow[u][v - n] += push;
      else
        flow[v][u - n] -= push;
    }
    supply[src] -= push;
    demand[best] -= push;
    remaining -= push;
    for (int u = 0; u < n + m; ++u)
      if (dist[u] < inf) pi[u] += dist[u];
  }
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      total += static_cast<double>(flow[i][j]) * cost[i][j];
  return total;
}

}  // namespace

double w2_assignment(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw DimensionMismatch("w2_assignment: dimension mismatch");
  if (a.rows() != b.rows())
    throw Error("w2_assignment: counts differ");
  if (a.rows() == 0) throw Error("w2_assignment: empty measure");
  double total = hungarian_cost(sq_cost_matrix(a, b));
  return std::sqrt(total / static_cast<double>(a.rows()));
}

double w2_transport(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw DimensionMismatch("w2_transport: dimension mismatch");
  int64_t n = a.rows(), m = b.rows();
  if (n == 0 || m == 0) throw Error("w2_transport: empty measure");
  int64_t g = std::gcd(n, m);
  int64_t lcm = n / g * m;
  if (lcm * (n + m) > 1000000)
    throw UnsupportedScale("w2_transport: lcm(N,M)*(N+M) exceeds 1e6");
  std::vector<int64_t> supply(n, lcm / n), demand(m, lcm / m);
  double total = transport_cost(sq_cost_matrix(a, b), std::move(supply),
                                std::move(demand));
  return std::sqrt(total / static_cast<double>(lcm));
}

double w2_distance(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
  if (mu.dim() != nu.dim())
    throw DimensionMismatch("w2_distance: dimension mismatch");
  Tensor a = mu.active_points();
  Tensor b = nu.active_points();
  return a.rows() == b.rows() ? w2_assignment(a, b) : w2_transport(a, b);
}

double pl_ratio(const KernelSpec& kernel, const DiscreteMeasure& mu_star,
                int n_random, uint64_t seed) {
  Tensor star = mu_star.active_points();
  int64_t n = star.rows(), d = star.cols();
  DiscreteMeasure target(star);
  double sum = 0.0;
  int used = 0;
  for (int r = 0; r < n_random; ++r) {
    Rng rng(derive_seed(seed, 0xd1a6, static_cast<uint64_t>(r)));
    DiscreteMeasure mu(rng.normal_matrix(n, d));
    double f = 0.5 * mmd_sq(kernel, mu, target);
    Tensor g = mmd_flow_gradient_fixed(kernel, mu, target);
    double norm_sq = 0.0;
    for (double v : g.vec()) norm_sq += v * v;
    norm_sq /= static_cast<double>(n);  // L2(mu) norm with uniform weights
    if (norm_sq < 1e-12) continue;
    sum += f / norm_sq;
    ++used;
  }
  if (used == 0) throw AllTermsSkipped("pl_ratio: every draw had ~zero gradient");
  return sum / static_cast<double>(used);
}

double grad_discrepancy_ratio(const ParamStore& params,
                              const ModelConfig& model, const FlowConfig& flow,
                              const Tensor& x, const CoreMasks& masks,
                              const DiscreteMeasure& mu_t,
                              const DiscreteMeasure& mu_star, int64_t t) {
  if (t < 1) throw Error("grad_discrepancy_ratio: t must be >= 1");
  // Solver-path gradient of G at mu_t, rescaled to the Wasserstein gradient.
  Tape tape;
  BoundParams p(tape, params, false);
  Var zv = tape.leaf(mu_t.points, true);
  Var xv = tape.constant(x);
  CoreMasks m = masks;
  m.z_mask = mu_t.mask;
  Var f = ddeq_core_forward(tape, zv, xv, p, model, m);
  Var g = half_mmd_sq_graph(tape, flow.kernel, zv, m.z_mask, f, m.z_mask);
  Tensor grad_g = tape.value(tape.grad(g, {zv})[0]);
  double n_active = static_cast<double>(mu_t.n_active());
  for (auto& v : grad_g.vec()) v *= n_active;

  Tensor grad_f = mmd_flow_gradient_fixed(flow.kernel, mu_t, mu_star);
  double diff_sq = 0.0;
  for (int64_t i = 0; i < grad_g.rows(); ++i)
    if (mu_t.mask[i])
      for (int64_t j = 0; j < grad_g.cols(); ++j) {
        double diff = grad_g(i, j) - grad_f(i, j);
        diff_sq += diff * diff;
      }
  diff_sq /= n_active;
  return diff_sq / epsilon_t(t);
}

double theorem_ratio(const std::vector<double>& grad_norm_sq, int64_t T) {
  if (T < 2) throw Error("theorem_ratio: T must be >= 2");
  if (static_cast<int64_t>(grad_norm_sq.size()) < T)
    throw Error("theorem_ratio: series shorter than T");
  double integral = 0.0;
  for (int64_t t = 0; t < T; ++t) integral += grad_norm_sq[t];
  double logT = std::log(static_cast<double>(T));
  return integral / (std::sqrt(static_cast<double>(T)) * logT * logT);
}

void write_diagnostics_csv(const std::string& path,
                           const std::vector<DiagnosticsRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  auto fmt = [](double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
  };
  out << "t,eps_t,pl_ratio,grad_discrepancy_ratio,theorem_ratio\n";
  for (const auto& r : rows) {
    out << r.t << "," << fmt(r.eps_t) << "," << fmt(r.pl) << ","
        << fmt(r.grad_discrepancy) << ",";
    if (r.has_theorem) out << fmt(r.theorem);
    out << "\n";
  }
}

}  // namespace ddeq
