#include "vqnerv/codebook.hpp"

#include <algorithm>
#include <atomic>
#include <limits>
#include <numeric>

#include <spdlog/spdlog.h>

#include "vqnerv/errors.hpp"

namespace vqnerv {

namespace {

constexpr float kCountFloor = 1e-5f;

float squared_distance(const float* a, const float* b, int d) {
  float s = 0.0f;
  for (int k = 0; k < d; ++k) {
    const float diff = a[k] - b[k];
    s += diff * diff;
  }
  return s;
}

bool is_zero_vector(const float* v, int d) {
  for (int k = 0; k < d; ++k)
    if (v[k] != 0.0f) return false;
  return true;
}

void require_rows(const Tensor& features, int dim, const char* what) {
  if (features.rank() != 2 || features.dim(1) != dim)
    throw DimensionError(std::string(what) + ": expected [M," + std::to_string(dim) + "], got " +
                         shape_str(features.shape()));
}

}  // namespace

std::vector<int> TokenGrid::left_half() const {
  std::vector<int> out;
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width / 2; ++j) out.push_back(at(i, j));
  return out;
}

std::vector<int> TokenGrid::right_half() const {
  std::vector<int> out;
  for (int i = 0; i < height; ++i)
    for (int j = width / 2; j < width; ++j) out.push_back(at(i, j));
  return out;
}

int nearest_code(const CodebookState& state, std::span<const float> v) {
  if (state.size() == 0 || state.filled == 0) throw StateError("quantize: empty codebook");
  const int d = state.dim();
  int best = 0;
  float best_dist = std::numeric_limits<float>::infinity();
  for (int i = 0; i < state.filled; ++i) {
    const float dist = squared_distance(v.data(), state.codes.ptr() + static_cast<std::size_t>(i) * d, d);
    if (dist < best_dist) {
      best_dist = dist;
      best = i;
    }
  }
  return best;
}

Tensor grid_to_rows(const Tensor& x) {
  require_rank(x, 3, "grid_to_rows");
  const int d = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor rows({hw, d});
  for (int k = 0; k < d; ++k)
    for (int p = 0; p < hw; ++p) rows[static_cast<std::size_t>(p) * d + k] = x[static_cast<std::size_t>(k) * hw + p];
  return rows;
}

QuantizeResult quantize(CodebookState& state, const Tensor& x) {
  if (state.size() == 0 || state.filled == 0) throw StateError("quantize: empty codebook");
  require_rank(x, 3, "quantize");
  const int d = state.dim();
  if (x.dim(0) != d)
    throw DimensionError("quantize: feature dim " + std::to_string(x.dim(0)) +
                         " != code dim " + std::to_string(d));
  const int ht = x.dim(1), wt = x.dim(2), hw = ht * wt;
  QuantizeResult r;
  r.z_q = Tensor(x.shape());
  r.tokens.height = ht;
  r.tokens.width = wt;
  r.tokens.indices.resize(hw);
  r.distances = Tensor({ht, wt});
  std::vector<float> v(d);
  for (int p = 0; p < hw; ++p) {
    for (int k = 0; k < d; ++k) v[k] = x[static_cast<std::size_t>(k) * hw + p];
    const int idx = nearest_code(state, v);
    const float* code = state.codes.ptr() + static_cast<std::size_t>(idx) * d;
    for (int k = 0; k < d; ++k) r.z_q[static_cast<std::size_t>(k) * hw + p] = code[k];
    r.tokens.indices[p] = idx;
    r.distances[p] = squared_distance(v.data(), code, d);
    ++state.usage_counter[idx];
  }
  return r;
}

Tensor lookup_codes(const CodebookState& state, const TokenGrid& tokens) {
  const int d = state.dim(), hw = tokens.height * tokens.width;
  if (hw <= 0 || tokens.indices.size() != static_cast<std::size_t>(hw))
    throw DimensionError("lookup_codes: malformed token grid");
  Tensor out({d, tokens.height, tokens.width});
  for (int p = 0; p < hw; ++p) {
    const int idx = tokens.indices[p];
    if (idx < 0 || idx >= state.size())
      throw IntegrityError("lookup_codes: token " + std::to_string(idx) + " out of range");
    for (int k = 0; k < d; ++k)
      out[static_cast<std::size_t>(k) * hw + p] = state.codes[static_cast<std::size_t>(idx) * d + k];
  }
  return out;
}

Var straight_through(const Var& x, const Tensor& z_q) {
  require_same_shape(x.value(), z_q, "straight_through");
  return make_result(z_q, {x}, [](Node& n) {
    Tensor& dst = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i];
  });
}

Var vq_loss(const Var& x, const Tensor& z_q, float beta) {
  require_same_shape(x.value(), z_q, "vq_loss");
  if (beta < 0.0f) throw ParameterError("vq_loss: beta must be >= 0");
  const std::size_t n = z_q.size();
  double mse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = x.value()[i] - z_q[i];
    mse += diff * diff;
  }
  mse /= static_cast<double>(n);
  Tensor value({1}, static_cast<float>((1.0 + beta) * mse));
  return make_result(std::move(value), {x}, [z_q, beta](Node& node) {
    const Tensor& xv = node.inputs[0]->value;
    Tensor& dst = node.inputs[0]->grad_buffer();
    const float scale = node.grad[0] * 2.0f * beta / static_cast<float>(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) dst[i] += scale * (xv[i] - z_q[i]);
  });
}

void ema_update(CodebookState& state, const Tensor& features, std::span<const int> tokens) {
  const int n = state.size(), d = state.dim();
  require_rows(features, d, "ema_update");
  const int m = features.dim(0);
  if (tokens.size() != static_cast<std::size_t>(m))
    throw DimensionError("ema_update: one token per feature row required");
  std::vector<float> counts(n, 0.0f);
  std::vector<float> sums(static_cast<std::size_t>(n) * d, 0.0f);
  for (int r = 0; r < m; ++r) {
    const int idx = tokens[r];
    if (idx < 0 || idx >= n) throw DimensionError("ema_update: invalid assignment");
    counts[idx] += 1.0f;
    for (int k = 0; k < d; ++k) sums[static_cast<std::size_t>(idx) * d + k] += features[static_cast<std::size_t>(r) * d + k];
  }
  const float g = state.decay;
  for (int i = 1; i < n; ++i) {
    state.ema_counts[i] = g * state.ema_counts[i] + (1.0f - g) * counts[i];
    const float denom = std::max(state.ema_counts[i], kCountFloor);
    for (int k = 0; k < d; ++k) {
      const std::size_t j = static_cast<std::size_t>(i) * d + k;
      state.ema_sums[j] = g * state.ema_sums[j] + (1.0f - g) * sums[j];
      state.codes[j] = state.ema_sums[j] / denom;
    }
  }
}

Tensor pool_kmeans_step(FeaturePool& pool, const Tensor& features, float decay) {
  if (!pool.ready()) throw StateError("pool_kmeans_step: pool not initialized");
  const int n = pool.nodes.dim(0), d = pool.nodes.dim(1);
  require_rows(features, d, "pool_kmeans_step");
  Tensor means = pool.nodes;
  const int m = features.dim(0);
  if (m == 0) return means;
  std::vector<float> counts(n, 0.0f);
  std::vector<float> sums(static_cast<std::size_t>(n) * d, 0.0f);
  for (int r = 0; r < m; ++r) {
    const float* v = features.ptr() + static_cast<std::size_t>(r) * d;
    int best = 0;
    float best_dist = std::numeric_limits<float>::infinity();
    for (int i = 0; i < n; ++i) {
      const float dist = squared_distance(v, pool.nodes.ptr() + static_cast<std::size_t>(i) * d, d);
      if (dist < best_dist) {
        best_dist = dist;
        best = i;
      }
    }
    counts[best] += 1.0f;
    for (int k = 0; k < d; ++k) sums[static_cast<std::size_t>(best) * d + k] += v[k];
  }
  for (int i = 0; i < n; ++i) {
    if (counts[i] > 0.0f)
      for (int k = 0; k < d; ++k)
        means[static_cast<std::size_t>(i) * d + k] = sums[static_cast<std::size_t>(i) * d + k] / counts[i];
    for (int k = 0; k < d; ++k) {
      const std::size_t j = static_cast<std::size_t>(i) * d + k;
      pool.nodes[j] = decay * pool.nodes[j] + (1.0f - decay) * means[j];
    }
    pool.node_sizes[i] = decay * pool.node_sizes[i] + (1.0f - decay) * counts[i];
  }
  return means;
}

int revive_dead_codes(CodebookState& state, const FeaturePool& pool) {
  if (!pool.ready()) throw StateError("revive_dead_codes: pool not initialized");
  const int n = state.size(), d = state.dim();
  const float threshold = state.dead_threshold;
  std::vector<int> eligible;
  for (int i = 0; i < pool.nodes.dim(0); ++i)
    if (pool.node_sizes[i] > threshold) eligible.push_back(i);
  int revived = 0;
  bool any_dead = false;
  for (int i = 1; i < n; ++i) {
    float* code = state.codes.ptr() + static_cast<std::size_t>(i) * d;
    if (state.ema_counts[i] >= threshold || is_zero_vector(code, d)) continue;
    any_dead = true;
    if (eligible.empty()) continue;
    int best = eligible.front();
    float best_dist = std::numeric_limits<float>::infinity();
    for (int e : eligible) {
      const float dist = squared_distance(code, pool.nodes.ptr() + static_cast<std::size_t>(e) * d, d);
      if (dist < best_dist) {
        best_dist = dist;
        best = e;
      }
    }
    const float* node = pool.nodes.ptr() + static_cast<std::size_t>(best) * d;
    std::copy(node, node + d, code);
    std::copy(node, node + d, state.ema_sums.ptr() + static_cast<std::size_t>(i) * d);
    state.ema_counts[i] = 1.0f;
    ++revived;
  }
  if (any_dead && eligible.empty()) {
    // Fires every step on small batches; warn once per process, then debug.
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true))
      spdlog::warn("revive_dead_codes: no pool node exceeds threshold {}; dead codes left as is",
                   threshold);
    else
      spdlog::debug("revive_dead_codes: no eligible pool node");
  }
  return revived;
}

Usage usage(const CodebookState& state) {
  Usage u;
  std::int64_t total = 0;
  for (std::int64_t c : state.usage_counter) {
    total += c;
    if (c > 0) ++u.distinct;
  }
  u.has_data = total > 0;
  u.fraction = u.has_data ? static_cast<double>(u.distinct) / state.size() : 0.0;
  return u;
}

void reset_usage(CodebookState& state) {
  std::fill(state.usage_counter.begin(), state.usage_counter.end(), 0);
}

Codebook::Codebook(const CodebookSettings& settings, Rng& rng)
    : settings_(settings), rng_(rng.engine()()) {
  if (settings.size < 2) throw ParameterError("codebook size must be >= 2");
  if (settings.dim < 1) throw ParameterError("codebook dim must be >= 1");
  if (settings.decay < 0.0f || settings.decay >= 1.0f)
    throw ParameterError("codebook decay must lie in [0, 1)");
  const int n = settings.size, d = settings.dim;
  state_.codes = Tensor::zeros({n, d});
  state_.ema_counts = Tensor::zeros({n});
  state_.ema_sums = Tensor::zeros({n, d});
  state_.decay = settings.decay;
  state_.dead_threshold = settings.dead_threshold;
  state_.usage_counter.assign(n, 0);
  if (settings.shallow_optimization) {
    state_.filled = 1;  // only the zero code until the first batches arrive
    pool_.nodes = Tensor::zeros({n, d});
    pool_.node_sizes = Tensor::zeros({n});
  } else {
    for (int i = 1; i < n; ++i) {
      state_.ema_counts[i] = 1.0f;
      for (int k = 0; k < d; ++k) {
        const float v = rng_.normal(0.0f, settings.init_stddev);
        state_.codes[static_cast<std::size_t>(i) * d + k] = v;
        state_.ema_sums[static_cast<std::size_t>(i) * d + k] = v;
      }
    }
    state_.filled = n;
  }
}

void Codebook::fill_from(const Tensor& features) {
  const int n = state_.size(), d = state_.dim(), m = features.dim(0);
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng_.engine());
  for (int r : order) {
    const float* v = features.ptr() + static_cast<std::size_t>(r) * d;
    if (pool_.filled < n) {
      std::copy(v, v + d, pool_.nodes.ptr() + static_cast<std::size_t>(pool_.filled) * d);
      pool_.node_sizes[pool_.filled] = 1.0f;
      ++pool_.filled;
    }
    if (state_.filled < n) {
      const int i = state_.filled;
      std::copy(v, v + d, state_.codes.ptr() + static_cast<std::size_t>(i) * d);
      std::copy(v, v + d, state_.ema_sums.ptr() + static_cast<std::size_t>(i) * d);
      state_.ema_counts[i] = 1.0f;
      ++state_.filled;
    }
    if (pool_.filled == n && state_.filled == n) break;
  }
}

Codebook::StepStats Codebook::update(const Tensor& features, std::span<const int> tokens) {
  StepStats stats;
  if (features.rank() != 2 || features.dim(0) == 0) return stats;
  if (settings_.shallow_optimization && !(state_.ready() && pool_.ready())) {
    fill_from(features);
    stats.filling = true;
    return stats;
  }
  ema_update(state_, features, tokens);
  if (settings_.shallow_optimization) {
    pool_kmeans_step(pool_, features, settings_.decay);
    stats.revived = revive_dead_codes(state_, pool_);
  }
  return stats;
}

}  // namespace vqnerv
