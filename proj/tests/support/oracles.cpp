#include "oracles.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <random>
#include <utility>

namespace oracle {

using cosim::Label;
using cosim::Triple;

namespace {

struct RefGraph {
  std::map<std::string, int> node;
  std::vector<std::vector<int>> adj;
  std::vector<std::pair<std::size_t, std::pair<int, int>>> edges;  // triple index, (from, to)

  int id(const std::string& name) {
    auto [it, inserted] = node.try_emplace(name, static_cast<int>(node.size()));
    if (inserted) adj.emplace_back();
    return it->second;
  }
};

std::map<std::string, RefGraph> build_graphs(std::span<const Triple> triples) {
  std::map<std::string, RefGraph> graphs;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    const auto& t = triples[i];
    auto& g = graphs[t.ref];
    const std::string& winner = t.y == Label::ACloser ? t.a : t.b;
    const std::string& loser = t.y == Label::ACloser ? t.b : t.a;
    const int from = g.id(loser);
    const int to = g.id(winner);
    g.adj[static_cast<std::size_t>(from)].push_back(to);
    g.edges.push_back({i, {from, to}});
  }
  for (auto& [ref, g] : graphs) {
    for (auto& list : g.adj) {
      std::sort(list.begin(), list.end());
      list.erase(std::unique(list.begin(), list.end()), list.end());
    }
  }
  return graphs;
}

// Every simple cycle whose smallest node is `start`; edges on them go to `on_cycle`.
void enumerate_from(const RefGraph& g, int start, int current, std::vector<int>& path, std::vector<bool>& in_path,
                    std::set<std::pair<int, int>>& on_cycle, std::size_t& cycle_count) {
  for (int next : g.adj[static_cast<std::size_t>(current)]) {
    if (next == start) {
      ++cycle_count;
      for (std::size_t k = 0; k + 1 < path.size(); ++k) on_cycle.insert({path[k], path[k + 1]});
      on_cycle.insert({path.back(), start});
    } else if (next > start && !in_path[static_cast<std::size_t>(next)]) {
      in_path[static_cast<std::size_t>(next)] = true;
      path.push_back(next);
      enumerate_from(g, start, next, path, in_path, on_cycle, cycle_count);
      path.pop_back();
      in_path[static_cast<std::size_t>(next)] = false;
    }
  }
}

std::set<std::pair<int, int>> cycle_edges(const RefGraph& g, std::size_t& cycle_count) {
  std::set<std::pair<int, int>> on_cycle;
  const int n = static_cast<int>(g.adj.size());
  for (int s = 0; s < n; ++s) {
    std::vector<int> path{s};
    std::vector<bool> in_path(static_cast<std::size_t>(n), false);
    in_path[static_cast<std::size_t>(s)] = true;
    enumerate_from(g, s, s, path, in_path, on_cycle, cycle_count);
  }
  return on_cycle;
}

}  // namespace

std::set<std::size_t> cycle_triples(std::span<const Triple> triples) {
  std::set<std::size_t> flagged;
  for (const auto& [ref, g] : build_graphs(triples)) {
    std::size_t count = 0;
    const auto on_cycle = cycle_edges(g, count);
    for (const auto& [index, edge] : g.edges) {
      if (on_cycle.contains(edge)) flagged.insert(index);
    }
  }
  return flagged;
}

bool acyclic(std::span<const Triple> triples) {
  for (const auto& [ref, g] : build_graphs(triples)) {
    std::size_t count = 0;
    cycle_edges(g, count);
    if (count > 0) return false;
  }
  return true;
}

std::vector<std::vector<std::size_t>> combinations(std::size_t n, std::size_t r) {
  std::vector<std::vector<std::size_t>> out;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcountll(mask)) != r) continue;
    std::vector<std::size_t> subset;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (std::uint64_t{1} << i)) subset.push_back(i);
    }
    out.push_back(subset);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<double> mlp_forward(const cosim::nets::MlpParams& params, const std::vector<double>& x) {
  std::vector<double> h = x;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    std::vector<double> next(static_cast<std::size_t>(layer.weight.rows()));
    for (Eigen::Index o = 0; o < layer.weight.rows(); ++o) {
      double z = layer.bias(o);
      for (Eigen::Index i = 0; i < layer.weight.cols(); ++i) z += layer.weight(o, i) * h[static_cast<std::size_t>(i)];
      const bool hidden = l + 1 < params.layers.size();
      next[static_cast<std::size_t>(o)] = hidden ? std::max(z, 0.0) : z;
    }
    h = std::move(next);
  }
  switch (params.output) {
    case cosim::nets::OutputActivation::Identity: break;
    case cosim::nets::OutputActivation::Sigmoid:
      for (auto& v : h) v = 1.0 / (1.0 + std::exp(-v));
      break;
    case cosim::nets::OutputActivation::Softmax: {
      const double mx = *std::max_element(h.begin(), h.end());
      double sum = 0.0;
      for (auto& v : h) {
        v = std::exp(v - mx);
        sum += v;
      }
      for (auto& v : h) v /= sum;
      break;
    }
  }
  return h;
}

double cosine_distance(const std::vector<double>& u, const std::vector<double>& v) {
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  const double c = uv / (std::sqrt(uu) * std::sqrt(vv));
  return 1.0 - std::clamp(c, -1.0, 1.0);
}

double combined_loss(const cosim::nets::MlpParams& projection, const cosim::nets::MlpParams& ranking,
                     const std::vector<double>& r, const std::vector<double>& a, const std::vector<double>& b, Label y,
                     double margin, double triplet_weight) {
  const auto gr = mlp_forward(projection, r);
  const auto ga = mlp_forward(projection, a);
  const auto gb = mlp_forward(projection, b);
  std::vector<double> input;
  input.insert(input.end(), gr.begin(), gr.end());
  input.insert(input.end(), ga.begin(), ga.end());
  input.insert(input.end(), gb.begin(), gb.end());
  const auto probs = mlp_forward(ranking, input);
  const double ce = -std::log(probs[y == Label::ACloser ? 0 : 1]);
  const double l_diff = (cosine_distance(gr, ga) - cosine_distance(gr, gb)) * static_cast<double>(cosim::sign(y));
  return ce + triplet_weight * std::max(margin - l_diff, 0.0);
}

std::vector<double> flatten(const cosim::nets::MlpParams& params) {
  std::vector<double> out;
  auto copy = params;
  copy.for_each_parameter([&](double& p) { out.push_back(p); });
  return out;
}

std::vector<double> finite_difference(cosim::nets::MlpParams& params, const std::function<double()>& f, double h) {
  std::vector<double> grad;
  params.for_each_parameter([&](double& p) {
    const double saved = p;
    p = saved + h;
    const double plus = f();
    p = saved - h;
    const double minus = f();
    p = saved;
    grad.push_back((plus - minus) / (2.0 * h));
  });
  return grad;
}

GridCount recount_grid(const std::vector<std::vector<double>>& features, const std::vector<bool>& correct,
                       const std::vector<std::size_t>& axes, std::size_t resolution) {
  std::vector<double> lo(axes.size(), INFINITY), hi(axes.size(), -INFINITY);
  for (const auto& f : features) {
    for (std::size_t k = 0; k < axes.size(); ++k) {
      lo[k] = std::min(lo[k], f[axes[k]]);
      hi[k] = std::max(hi[k], f[axes[k]]);
    }
  }
  std::size_t n_cells = 1;
  for (std::size_t k = 0; k < axes.size(); ++k) n_cells *= resolution;
  GridCount out{std::vector<std::uint32_t>(n_cells, 0), std::vector<std::uint32_t>(n_cells, 0)};
  for (std::size_t i = 0; i < features.size(); ++i) {
    std::size_t cell = 0, stride = 1;
    for (std::size_t k = 0; k < axes.size(); ++k) {
      long bin = 0;
      if (hi[k] > lo[k]) bin = static_cast<long>(std::floor((features[i][axes[k]] - lo[k]) / (hi[k] - lo[k]) * resolution));
      bin = std::clamp<long>(bin, 0, static_cast<long>(resolution) - 1);
      cell += stride * static_cast<std::size_t>(bin);
      stride *= resolution;
    }
    out.total[cell] += 1;
    if (correct[i]) out.correct[cell] += 1;
  }
  return out;
}

std::vector<Triple> random_digraph_triples(std::size_t n_candidates, std::size_t n_triples, std::uint64_t seed,
                                           const std::string& ref) {
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n_candidates - 1);
  std::bernoulli_distribution coin(0.5);
  std::vector<Triple> out;
  for (std::size_t k = 0; k < n_triples; ++k) {
    const std::size_t a = pick(gen);
    std::size_t b = pick(gen);
    while (b == a) b = pick(gen);
    out.push_back(Triple{ref, "c" + std::to_string(a), "c" + std::to_string(b), coin(gen) ? Label::ACloser : Label::BCloser});
  }
  return out;
}

}  // namespace oracle

namespace oracle {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckResult check_ranking_gradients(std::uint64_t seed, double h, double floor) {
  using cosim::nets::MlpParams;
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<std::size_t> width(3, 6);
  std::normal_distribution<double> normal;
  const std::size_t d = width(gen), hidden = width(gen), proj = width(gen);
  const std::size_t rank_h1 = width(gen), rank_h2 = width(gen), batch = 2 + seed % 3;

  cosim::Rng rng(seed * 7919 + 1);
  const std::array<std::size_t, 3> proj_dims{d, hidden, proj};
  const std::array<std::size_t, 4> rank_dims{3 * proj, rank_h1, rank_h2, 2};
  MlpParams projection = cosim::nets::make_mlp(proj_dims, cosim::nets::OutputActivation::Identity, rng);
  MlpParams ranking = cosim::nets::make_mlp(rank_dims, cosim::nets::OutputActivation::Softmax, rng);
  // Non-zero biases so every parameter is exercised.
  for (auto* net : {&projection, &ranking}) {
    for (auto& layer : net->layers) {
      for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = 0.1 * normal(gen);
    }
  }

  cosim::nets::TripleBatch tb;
  tb.ref.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(batch));
  tb.a.resize(tb.ref.rows(), tb.ref.cols());
  tb.b.resize(tb.ref.rows(), tb.ref.cols());
  std::vector<std::array<std::vector<double>, 3>> raw(batch);
  for (std::size_t j = 0; j < batch; ++j) {
    for (int part = 0; part < 3; ++part) {
      raw[j][static_cast<std::size_t>(part)].resize(d);
      for (std::size_t k = 0; k < d; ++k) {
        const double v = normal(gen);
        raw[j][static_cast<std::size_t>(part)][k] = v;
        cosim::Matrix& m = part == 0 ? tb.ref : (part == 1 ? tb.a : tb.b);
        m(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = v;
      }
    }
    tb.labels.push_back(j % 2 == 0 ? Label::ACloser : Label::BCloser);
  }

  const double margin = 0.1, weight = 0.1;
  auto loss = [&] {
    double sum = 0.0;
    for (std::size_t j = 0; j < batch; ++j) {
      sum += combined_loss(projection, ranking, raw[j][0], raw[j][1], raw[j][2], tb.labels[j], margin, weight);
    }
    return sum / static_cast<double>(batch);
  };

  const auto step = cosim::nets::ranking_loss_and_gradients(projection, ranking, tb, {margin, weight, 1.0});
  const auto numeric_proj = finite_difference(projection, loss, h);
  const auto numeric_rank = finite_difference(ranking, loss, h);
  const auto analytic_proj = flatten(step.projection_grad);
  const auto analytic_rank = flatten(step.ranking_grad);

  GradCheckResult result;
  result.loss = step.loss;
  for (std::size_t i = 0; i < numeric_proj.size(); ++i) {
    result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic_proj[i], numeric_proj[i], floor));
  }
  for (std::size_t i = 0; i < numeric_rank.size(); ++i) {
    result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic_rank[i], numeric_rank[i], floor));
  }
  result.coordinates = numeric_proj.size() + numeric_rank.size();
  return result;
}

}  // namespace oracle
