#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vqnerv/autograd.hpp"
#include "vqnerv/rng.hpp"

namespace vqnerv {

struct CodebookSettings {
  int size = 64;               // N, including the reserved zero code at index 0
  int dim = 8;                 // D
  float decay = 0.99f;         // EMA gamma
  float dead_threshold = 1.0f;
  float beta = 0.25f;          // commitment weight
  bool shallow_optimization = true;
  float init_stddev = 1.0f;    // random init when shallow optimization is off
};

// Token indices of one frame, row-major [height, width]. Columns
// [0, width/2) are attributed to the residual against the current frame's
// decoder feature and [width/2, width) to the residual against frame t-1.
struct TokenGrid {
  int height = 0;
  int width = 0;
  std::vector<int> indices;

  int at(int i, int j) const { return indices[static_cast<std::size_t>(i) * width + j]; }
  std::size_t size() const { return indices.size(); }
  std::vector<int> left_half() const;
  std::vector<int> right_half() const;
  bool operator==(const TokenGrid&) const = default;
};

struct CodebookState {
  Tensor codes;       // [N, D]; row 0 is the reserved zero code
  Tensor ema_counts;  // [N]
  Tensor ema_sums;    // [N, D]
  float decay = 0.99f;
  float dead_threshold = 1.0f;
  std::vector<std::int64_t> usage_counter;  // hits per code since reset_usage
  int filled = 0;     // codes [0, filled) are live; == N once initialized

  int size() const { return codes.empty() ? 0 : codes.dim(0); }
  int dim() const { return codes.empty() ? 0 : codes.dim(1); }
  bool ready() const { return filled == size(); }
};

struct FeaturePool {
  Tensor nodes;       // [N, D]
  Tensor node_sizes;  // [N]
  int filled = 0;

  bool ready() const { return !nodes.empty() && filled == nodes.dim(0); }
};

struct QuantizeResult {
  Tensor z_q;        // [D, Ht, Wt]
  TokenGrid tokens;
  Tensor distances;  // [Ht, Wt] squared distance to the chosen code
};

struct Usage {
  double fraction = 0.0;
  bool has_data = false;
  int distinct = 0;
};

// Nearest code under squared Euclidean distance, ties to the lowest index.
// Only live codes [0, filled) are candidates. Records usage.
QuantizeResult quantize(CodebookState& state, const Tensor& x);

// Read-only nearest-code search for one D-vector.
int nearest_code(const CodebookState& state, std::span<const float> v);

// Gathers codes for a token grid into [D, Ht, Wt].
Tensor lookup_codes(const CodebookState& state, const TokenGrid& tokens);

// Value of z_q, gradient routed to x unchanged.
Var straight_through(const Var& x, const Tensor& z_q);

// Element-mean of |sg[x] - z_q|^2 + beta |x - sg[z_q]|^2. Only the
// commitment term sends gradient (to x); codes move through EMA.
Var vq_loss(const Var& x, const Tensor& z_q, float beta);

// features [M, D], one token per row. The reserved zero code is never touched.
void ema_update(CodebookState& state, const Tensor& features, std::span<const int> tokens);

// One Lloyd iteration over `features` seeded by the pool nodes; empty clusters
// keep their node. Pool nodes and sizes are then EMA-blended toward the batch
// result. Returns the batch cluster nodes [N, D].
Tensor pool_kmeans_step(FeaturePool& pool, const Tensor& features, float decay);

// Replaces every non-reserved code whose EMA count is below the dead threshold
// with the nearest pool node whose size exceeds the threshold. Returns the
// number of codes replaced.
int revive_dead_codes(CodebookState& state, const FeaturePool& pool);

Usage usage(const CodebookState& state);
void reset_usage(CodebookState& state);

// Flattens [D, Ht, Wt] to [Ht*Wt, D] rows in token order.
Tensor grid_to_rows(const Tensor& x);

// Codebook plus feature pool, driving the per-step schedule:
// fill (first batches) -> EMA update -> pool k-means -> dead-code revival.
class Codebook {
 public:
  Codebook() = default;
  Codebook(const CodebookSettings& settings, Rng& rng);

  QuantizeResult quantize(const Tensor& x) { return vqnerv::quantize(state_, x); }

  struct StepStats {
    int revived = 0;
    bool filling = false;
  };
  // One codebook training step given a batch of features and their tokens.
  StepStats update(const Tensor& features, std::span<const int> tokens);

  CodebookState& state() { return state_; }
  const CodebookState& state() const { return state_; }
  FeaturePool& pool() { return pool_; }
  const FeaturePool& pool() const { return pool_; }
  const CodebookSettings& settings() const { return settings_; }

 private:
  void fill_from(const Tensor& features);

  CodebookSettings settings_;
  CodebookState state_;
  FeaturePool pool_;
  Rng rng_{0};
};

}  // namespace vqnerv
