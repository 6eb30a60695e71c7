#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vqnerv/autograd.hpp"
#include "vqnerv/codebook.hpp"
#include "vqnerv/rng.hpp"
#include "vqnerv/transforms.hpp"

namespace vqnerv {

struct ModelConfig {
  int height = 64;
  int width = 128;
  std::vector<int> strides{4, 2, 2, 2};
  int embed_channels = 16;
  int encoder_width = 32;        // channels of encoder stages after the first
  double decoder_budget = 0.3e6; // target decode-side parameter count
  int decoder_channels = 0;      // first decoder block width; 0 solves it from the budget
  float reduction = 1.2f;        // width ratio between consecutive decoder blocks
  int min_channels = 4;
  int haar_levels = 3;
  bool use_vq = true;            // false builds the plain decoder (O_t = 0)
  int coupling_hidden = 4;
  int coupling_kernel = 1;
  float scale_clamp = 5.0f;
  bool detach_block_inputs = true;  // f_d enters the VQ block without gradient
  CodebookSettings codebook{512, 8, 0.99f, 1.0f, 0.25f, true, 1.0f};

  // Presets for 1280x640 and 1920x960 input.
  static ModelConfig preset_1280x640();
  static ModelConfig preset_1920x960();
};

struct ParamSpec {
  std::string name;
  Shape shape;
  bool decode_side = true;
};

// Every layer shape the configuration implies, independent of weight values.
struct ModelPlan {
  std::vector<int> decoder_widths;  // per decoder block; the last feeds the head
  int trunk_channels = 0;           // C': f_e, f_d and trunk output channels
  int block_channels = 0;           // C0 = 2 C'
  int haar_channels = 0;            // 4^levels * C0
  Shape embedding_shape;            // [E, H/prod(s), W/prod(s)]
  int feature_height = 0, feature_width = 0;  // H0, W0
  int token_height = 0, token_width = 0;
  std::vector<ParamSpec> params;
  std::size_t decoder_params = 0;
  std::size_t total_params = 0;
};

// Throws ConfigError when strides do not divide the resolution or the Haar
// cascade does not fit the shallow feature map.
void validate(const ModelConfig& config);
ModelPlan make_plan(const ModelConfig& config, int first_width);
// Picks the first decoder width whose decode-side count is closest to the
// budget (or uses config.decoder_channels when set).
ModelPlan solve_plan(const ModelConfig& config);

// Parameters that ship in the bitstream: everything except the encoder and
// the encode-side projection into codebook space.
bool is_decode_side(const std::string& name);

enum class QuantMode {
  kCodebook,     // nearest-code substitution with straight-through gradient
  kPassThrough,  // identity in place of quantization
};

struct FrameForward {
  Var embedding;
  Var f_e;
  Var f_d;
  Var o_t;             // undefined without the VQ path
  Var reconstruction;  // [3,H,W] in [0,1]
  Var vq_loss;         // undefined without the VQ path or in pass-through mode
  TokenGrid tokens;
  Tensor vq_features;  // [tokens, D] pre-quantization rows
};

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  const ModelPlan& plan() const { return plan_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  Codebook& codebook() { return codebook_; }
  const Codebook& codebook() const { return codebook_; }

  struct Encoded {
    Var embedding;
    Var f_e;
  };
  Encoded encode_frame(const Var& frame) const;

  struct Trunk {
    Var f_d;
    Var trunk_out;
  };
  Trunk decode_trunk(const Var& embedding) const;

  struct BlockOutput {
    Var o_t;
    Var vq_loss;
    TokenGrid tokens;
    Tensor features;
  };
  BlockOutput vq_block(const Var& f_e, const Var& f_d_t, const Var& f_d_tm1, QuantMode mode);

  // Decode-side half of the block: quantized features [D,Ht,Wt] -> O_t.
  Var fuse(const Var& z) const;
  Var fuse_tokens(const TokenGrid& tokens) const;

  // Dec0 + head. An undefined o_t gives the plain decoder path.
  Var reconstruct_frame(const Var& trunk_out, const Var& o_t) const;

  // One frame with an explicit t-1 decoder feature; an empty f_d_tm1 means
  // frame t stands in for t-1.
  FrameForward forward_frame(const Var& frame, const Tensor& f_d_tm1, QuantMode mode);

  // All frames in index order, caching f_d for the next frame.
  std::vector<FrameForward> forward_video(const std::vector<Tensor>& frames, QuantMode mode);

  // Decoder-only inference from a transmitted embedding and token grid.
  Tensor decode_frame(const Tensor& embedding, const TokenGrid& tokens) const;

  std::size_t decoder_parameter_count() const;

 private:
  struct Conv {
    Var weight, bias;
    int stride = 1, padding = 0;
    Var operator()(const Var& x) const;
  };
  struct EncoderStage {
    Conv down;
    Var norm_gamma, norm_beta, block_gamma, block_beta;
    Conv block_conv, block_pw;
  };

  Conv make_conv(const std::string& name, int in, int out, int k, int stride, int padding,
                 bool bias, bool zero);

  ModelConfig config_;
  ModelPlan plan_;
  ParameterSet params_;
  Rng rng_;
  Codebook codebook_;
  CouplingBlock coupling_;

  std::vector<EncoderStage> encoder_;
  Conv encoder_out_;
  std::vector<Conv> decoder_;  // trunk blocks then Dec0
  Conv head_;
  Conv proj_down_, proj_up_, gate_ux_, gate_uf_, gate_vx_, gate_vf_, adapter_;
  Var agnostic_;
};

}  // namespace vqnerv
