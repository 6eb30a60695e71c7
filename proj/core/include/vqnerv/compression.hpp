#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vqnerv/tensor.hpp"

namespace vqnerv {

using Bytes = std::vector<std::uint8_t>;

// Zeros the floor(ratio * total) smallest-magnitude entries across all
// tensors jointly; ties keep tensor order then element order. Returns one
// keep-mask per tensor (1 = kept).
std::vector<std::vector<std::uint8_t>> prune_global_l1(std::span<Tensor* const> weights,
                                                       double ratio);
void apply_mask(Tensor& weight, std::span<const std::uint8_t> keep);

struct QuantizedTensor {
  Shape shape;
  std::vector<std::uint8_t> codes;
  float min = 0.0f;
  float scale = 0.0f;  // (max - min) / 255; 0 for constant tensors
};

// Min-max map onto [0,255] with round-half-to-even.
QuantizedTensor quantize_8bit(const Tensor& x);
Tensor dequantize(const QuantizedTensor& q);

// Canonical Huffman code lengths (<= max_length) for a 256-symbol histogram.
// A single used symbol gets length 1.
std::array<std::uint8_t, 256> huffman_lengths(std::span<const std::uint64_t> counts,
                                              int max_length = 16);

// Self-describing stream: u32 symbol count, 256 code lengths, then the
// MSB-first bit payload.
Bytes huffman_encode(std::span<const std::uint8_t> symbols);
Bytes huffman_decode(std::span<const std::uint8_t> stream);

// RFC 1951 raw deflate. Decode throws IntegrityError on corrupt input.
Bytes deflate_encode(std::span<const std::uint8_t> bytes, int level = 9);
Bytes deflate_decode(std::span<const std::uint8_t> stream);

// Little-endian byte writer/reader used by every binary format.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void str(const std::string& s);  // u32 length + bytes
  void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void blob(std::span<const std::uint8_t> b);  // u64 length + bytes
  Bytes& data() { return out_; }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::string str();
  std::span<const std::uint8_t> bytes(std::size_t n);
  std::span<const std::uint8_t> blob();
  std::size_t remaining() const { return in_.size() - pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

struct Section {
  std::uint8_t tag = 0;
  Bytes payload;
};

// magic(4) + u16 version + u32 count + count x (u8 tag, u64 length) + payloads.
Bytes write_container(const std::array<char, 4>& magic, std::uint16_t version,
                      const std::vector<Section>& sections);
// Throws IntegrityError on wrong magic, version mismatch, or any length that
// does not account for the file exactly.
std::vector<Section> read_container(std::span<const std::uint8_t> bytes,
                                    const std::array<char, 4>& magic, std::uint16_t version);
std::size_t container_header_size(std::size_t sections);

}  // namespace vqnerv
