#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "vqnerv/codebook.hpp"
#include "vqnerv/compression.hpp"
#include "vqnerv/model.hpp"

namespace vqnerv {

inline constexpr std::array<char, 4> kBitstreamMagic{'V', 'Q', 'N', 'V'};
inline constexpr std::uint16_t kBitstreamVersion = 1;

enum SectionTag : std::uint8_t {
  kSectionConfig = 1,
  kSectionWeights = 2,
  kSectionEmbeddings = 3,
  kSectionTokens = 4,
  kSectionCodebook = 5,
};

struct QuantizedWeight {
  std::string name;
  QuantizedTensor tensor;
  std::vector<std::uint8_t> keep;  // empty when unpruned; else 1 = kept

  bool operator==(const QuantizedWeight&) const;
};

// Everything the decoder consumes, already quantized.
struct Artifacts {
  ModelConfig config;  // decoder_channels resolved
  std::vector<QuantizedWeight> weights;
  std::vector<QuantizedTensor> embeddings;  // per frame
  std::vector<TokenGrid> tokens;            // per frame, codebook indices
  Tensor codebook;                          // [N, D]; row 0 is the zero code

  int frames() const { return static_cast<int>(embeddings.size()); }
};

struct CompressionReport {
  std::size_t config_bytes = 0;
  std::size_t weight_bytes = 0;
  std::size_t embedding_bytes = 0;
  std::size_t token_bytes = 0;
  std::size_t codebook_bytes = 0;
  std::size_t raw_embedding_bytes = 0;  // before deflate
  std::size_t raw_token_bytes = 0;
  std::size_t raw_weight_bytes = 0;     // one byte per transmitted weight code
  std::size_t total_bytes = 0;          // TotalSize: sum of section lengths
  std::size_t file_bytes = 0;           // TotalSize plus container header
  int used_codes = 0;                   // non-zero codes transmitted
  int frames = 0;
  int height = 0;
  int width = 0;
  double bpp = 0.0;
  std::optional<double> psnr;
  std::optional<double> ssim;

  std::size_t decoder_bytes() const { return config_bytes + weight_bytes; }
  std::size_t frame_bytes() const { return embedding_bytes + token_bytes; }
};

void write_report_csv(std::ostream& os, const CompressionReport& r);
void write_report_text(std::ostream& os, const CompressionReport& r);

struct Packed {
  Bytes bytes;
  CompressionReport report;
};
Packed pack(const Artifacts& artifacts);

struct Unpacked {
  Artifacts artifacts;     // codebook compacted: row k+1 = k-th used code, tokens compact
  std::vector<int> remap;  // compact index k+1 -> original index (remap[0] = 0)
  CompressionReport report;
};
// Throws IntegrityError on any inconsistency, including tokens that
// reference codes missing from the compacted table.
Unpacked unpack(std::span<const std::uint8_t> bytes);

// Quantizes the decode-side parameters of `model` in place (masked entries
// stay exactly zero) and returns them. `keep` maps parameter names to prune
// masks.
std::vector<QuantizedWeight> quantize_decoder(
    Model& model, const std::vector<std::pair<std::string, std::vector<std::uint8_t>>>& keep);

// Installs dequantized weights and a codebook table into a model.
void load_decoder(Model& model, const std::vector<QuantizedWeight>& weights,
                  const Tensor& codebook);

// Encoder side of compression on a model whose decoder is already quantized:
// 8-bit embeddings, tokens computed against the quantized decoder.
Artifacts encode_video(Model& model, const std::vector<Tensor>& frames,
                       std::vector<QuantizedWeight> weights);

// Reconstructions the quantized model in memory produces for `artifacts`.
std::vector<Tensor> reconstruct(const Model& model, const Artifacts& artifacts);

struct DecodedVideo {
  std::vector<Tensor> frames;
  CompressionReport report;
};
// Decoder-only inference from a bitstream. Ground truth, when given, fills
// PSNR/SSIM in the report.
DecodedVideo decode_video(std::span<const std::uint8_t> bytes,
                          const std::vector<Tensor>* ground_truth = nullptr);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace vqnerv
