#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "vqnerv/checkpoint.hpp"
#include "vqnerv/codec.hpp"
#include "vqnerv/config.hpp"
#include "vqnerv/data.hpp"
#include "vqnerv/losses.hpp"
#include "vqnerv/model.hpp"

namespace vqnerv {

// Frames in training order. For inpainting the encoder sees masked inputs
// while losses and metrics use the clean targets.
struct TrainData {
  std::vector<Tensor> inputs;
  std::vector<Tensor> targets;
  std::vector<int> indices;  // original frame index of each entry
  Tensor mask;               // [H,W]; empty unless inpainting
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  double usage = 0.0;
  float lr = 0.0f;
};
void write_epoch_csv(std::ostream& os, const std::vector<EpochRecord>& rows);

struct TrainSettings {
  int epochs = 1;
  AdamSettings adam;
  float alpha = 0.7f;
  int eval_every = 1;
  std::uint64_t seed = 1;
  const PruneMasks* keep = nullptr;  // re-applied after every step
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double best_psnr = 0.0;
  int best_epoch = 0;
  double first_loss = 0.0;
};

// Adam over all parameters with cosine decay; codebook EMA and shallow
// optimization every step. The best-PSNR state is restored on return. A
// non-finite loss restores the last good state and throws NumericError.
TrainResult train_model(Model& model, const TrainData& data, const TrainSettings& settings,
                        const std::function<void(const EpochRecord&)>& on_epoch = {});

struct Evaluation {
  std::vector<FrameMetrics> frames;
  std::vector<Tensor> reconstructions;
  std::vector<Tensor> embeddings;
  std::vector<TokenGrid> tokens;
  double psnr = 0.0;
  double ssim = 0.0;
  double usage = 0.0;
};
Evaluation evaluate(Model& model, const TrainData& data);
Evaluation score(const std::vector<Tensor>& outputs, const std::vector<Tensor>& targets,
                 const std::vector<int>& indices);

// Global L1 pruning over decode-side ".weight" tensors.
PruneMasks prune_decoder(Model& model, double ratio);

std::vector<Tensor> load_video(const RunConfig& config);
Tensor make_mask(const RunConfig& config, int height, int width);
TrainData make_train_data(const RunConfig& config, const std::vector<Tensor>& video,
                          const std::vector<int>& indices);
TrainSettings train_settings(const RunConfig& config, int epochs);

struct CompressionResult {
  PruneMasks masks;
  Artifacts artifacts;
  Packed packed;
  double float_psnr = 0.0;      // before pruning
  double pruned_psnr = 0.0;     // after pruning and fine-tuning
  double quantized_psnr = 0.0;  // in-memory 8-bit model
  double quantized_ssim = 0.0;
  std::vector<Tensor> reconstructions;  // in-memory 8-bit model
  std::vector<EpochRecord> finetune;
};
// Prune, fine-tune and quantize a trained model in place, then pack.
CompressionResult compress(Model& model, const TrainData& data, const RunConfig& config);

// Run drivers. Each writes config.txt and its CSVs into config.out_dir.
struct RunSummary {
  std::optional<double> psnr;
  std::optional<double> ssim;
  std::optional<CompressionReport> report;
};
RunSummary run_train(const RunConfig& config);
RunSummary run_eval(const RunConfig& config, const std::filesystem::path& checkpoint);
RunSummary run_encode(const RunConfig& config, const std::filesystem::path& checkpoint);
RunSummary run_decode(const std::filesystem::path& bitstream, const std::filesystem::path& out_dir,
                      const RunConfig* ground_truth);
struct InpaintSummary {
  double input_psnr = 0.0;
  double model_psnr = 0.0;
  double model_ssim = 0.0;
};
InpaintSummary run_inpaint(const RunConfig& config);
struct InterpSummary {
  double train_psnr = 0.0;
  double test_psnr = 0.0;
  std::vector<FrameMetrics> rows;
};
InterpSummary run_interp(const RunConfig& config);
struct RdPoint {
  double budget = 0.0;
  std::size_t total_bytes = 0;
  double bpp = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};
std::vector<RdPoint> run_rd_curve(const RunConfig& config);

// Interpolation protocol on a model trained on even frames: odd frame t uses
// the mean of the neighbouring even embeddings and the tokens of frame t-1.
InterpSummary interpolate_odd(Model& model, const std::vector<Tensor>& video);

}  // namespace vqnerv
