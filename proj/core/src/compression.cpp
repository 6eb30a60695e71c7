#include "vqnerv/compression.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

#include <zlib.h>

#include "vqnerv/errors.hpp"

namespace vqnerv {

std::vector<std::vector<std::uint8_t>> prune_global_l1(std::span<Tensor* const> weights,
                                                       double ratio) {
  if (!(ratio >= 0.0) || ratio >= 1.0) throw ParameterError("prune ratio must be in [0,1)");
  struct Ref {
    float mag;
    std::uint32_t tensor;
    std::uint32_t index;
  };
  std::vector<Ref> refs;
  std::vector<std::vector<std::uint8_t>> masks;
  for (std::size_t t = 0; t < weights.size(); ++t) {
    const Tensor& w = *weights[t];
    masks.emplace_back(w.size(), 1);
    for (std::size_t i = 0; i < w.size(); ++i)
      refs.push_back({std::abs(w[i]), static_cast<std::uint32_t>(t), static_cast<std::uint32_t>(i)});
  }
  const std::size_t k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(refs.size())));
  if (k == 0) return masks;
  std::stable_sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) { return a.mag < b.mag; });
  for (std::size_t i = 0; i < k; ++i) {
    masks[refs[i].tensor][refs[i].index] = 0;
    (*weights[refs[i].tensor])[refs[i].index] = 0.0f;
  }
  return masks;
}

void apply_mask(Tensor& weight, std::span<const std::uint8_t> keep) {
  if (keep.size() != weight.size()) throw DimensionError("apply_mask: mask size mismatch");
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (!keep[i]) weight[i] = 0.0f;
}

QuantizedTensor quantize_8bit(const Tensor& x) {
  if (!x.all_finite()) throw NumericError("quantize_8bit: non-finite input");
  QuantizedTensor q;
  q.shape = x.shape();
  q.codes.assign(x.size(), 0);
  if (x.empty()) return q;
  const auto [lo, hi] = std::minmax_element(x.storage().begin(), x.storage().end());
  q.min = *lo;
  if (*hi == *lo) return q;
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  q.scale = static_cast<float>(range / 255.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    // nearbyint rounds half to even under the default rounding mode.
    const double c = std::nearbyint((static_cast<double>(x[i]) - q.min) * 255.0 / range);
    q.codes[i] = static_cast<std::uint8_t>(std::clamp(c, 0.0, 255.0));
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor out(q.shape);
  if (out.size() != q.codes.size()) throw IntegrityError("dequantize: payload size mismatch");
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = q.min + static_cast<float>(q.codes[i]) * q.scale;
  return out;
}

std::array<std::uint8_t, 256> huffman_lengths(std::span<const std::uint64_t> counts,
                                              int max_length) {
  if (counts.size() != 256) throw ParameterError("huffman_lengths: need 256 counts");
  std::array<std::uint8_t, 256> lengths{};
  std::vector<int> used;
  for (int s = 0; s < 256; ++s)
    if (counts[s] > 0) used.push_back(s);
  if (used.empty()) return lengths;
  if (used.size() == 1) {
    lengths[used[0]] = 1;
    return lengths;
  }
  if ((std::size_t{1} << max_length) < used.size())
    throw ParameterError("huffman_lengths: max length too small");

  // Package-merge: items carry how often each leaf occurs inside them.
  std::stable_sort(used.begin(), used.end(),
                   [&](int a, int b) { return counts[a] < counts[b]; });
  const std::size_t n = used.size();
  struct Item {
    std::uint64_t weight;
    std::vector<std::uint16_t> leaves;  // occurrences per position in `used`
  };
  std::vector<Item> leaves;
  for (std::size_t i = 0; i < n; ++i) {
    Item it{counts[used[i]], std::vector<std::uint16_t>(n, 0)};
    it.leaves[i] = 1;
    leaves.push_back(std::move(it));
  }
  std::vector<Item> list = leaves;
  for (int level = 1; level < max_length; ++level) {
    std::vector<Item> packages;
    for (std::size_t i = 0; i + 1 < list.size(); i += 2) {
      Item p{list[i].weight + list[i + 1].weight, list[i].leaves};
      for (std::size_t j = 0; j < n; ++j) p.leaves[j] += list[i + 1].leaves[j];
      packages.push_back(std::move(p));
    }
    std::vector<Item> merged;
    merged.reserve(leaves.size() + packages.size());
    std::size_t a = 0, b = 0;
    while (a < leaves.size() || b < packages.size()) {
      if (b >= packages.size() || (a < leaves.size() && leaves[a].weight <= packages[b].weight))
        merged.push_back(leaves[a++]);
      else
        merged.push_back(std::move(packages[b++]));
    }
    list = std::move(merged);
  }
  std::vector<int> depth(n, 0);
  for (std::size_t i = 0; i < 2 * n - 2; ++i)
    for (std::size_t j = 0; j < n; ++j) depth[j] += list[i].leaves[j];
  for (std::size_t j = 0; j < n; ++j) lengths[used[j]] = static_cast<std::uint8_t>(depth[j]);
  return lengths;
}

namespace {

// Canonical codes: symbols sorted by (length, value).
std::array<std::uint32_t, 256> canonical_codes(const std::array<std::uint8_t, 256>& lengths) {
  std::array<std::uint32_t, 256> codes{};
  std::uint32_t code = 0;
  for (int len = 1; len <= 32; ++len) {
    for (int s = 0; s < 256; ++s)
      if (lengths[s] == len) codes[s] = code++;
    code <<= 1;
  }
  return codes;
}

}  // namespace

Bytes huffman_encode(std::span<const std::uint8_t> symbols) {
  std::array<std::uint64_t, 256> counts{};
  for (std::uint8_t s : symbols) ++counts[s];
  const auto lengths = huffman_lengths(counts);
  const auto codes = canonical_codes(lengths);
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(symbols.size()));
  w.bytes(lengths);
  std::uint64_t acc = 0;
  int bits = 0;
  for (std::uint8_t s : symbols) {
    acc = (acc << lengths[s]) | codes[s];
    bits += lengths[s];
    while (bits >= 8) {
      bits -= 8;
      w.u8(static_cast<std::uint8_t>(acc >> bits));
    }
  }
  if (bits > 0) w.u8(static_cast<std::uint8_t>(acc << (8 - bits)));
  return w.take();
}

Bytes huffman_decode(std::span<const std::uint8_t> stream) {
  ByteReader r(stream);
  const std::uint32_t count = r.u32();
  std::array<std::uint8_t, 256> lengths{};
  auto table = r.bytes(256);
  std::copy(table.begin(), table.end(), lengths.begin());
  // first code, first index and count per length, canonical order.
  std::array<int, 33> per_len{};
  std::vector<std::uint8_t> sorted;
  for (int len = 1; len <= 32; ++len)
    for (int s = 0; s < 256; ++s)
      if (lengths[s] == len) {
        ++per_len[len];
        sorted.push_back(static_cast<std::uint8_t>(s));
      }
  for (int s = 0; s < 256; ++s)
    if (lengths[s] > 32) throw IntegrityError("huffman: code length out of range");
  if (count > 0 && sorted.empty()) throw IntegrityError("huffman: empty code table");

  Bytes out;
  out.reserve(count);
  auto payload = r.bytes(r.remaining());
  std::size_t bitpos = 0;
  const std::size_t total_bits = payload.size() * 8;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::uint32_t code = 0;
    std::uint32_t first = 0;
    int index = 0;
    bool found = false;
    for (int len = 1; len <= 32; ++len) {
      if (bitpos >= total_bits) throw IntegrityError("huffman: truncated payload");
      code = (code << 1) | ((payload[bitpos >> 3] >> (7 - (bitpos & 7))) & 1u);
      ++bitpos;
      if (code - first < static_cast<std::uint32_t>(per_len[len])) {
        out.push_back(sorted[index + (code - first)]);
        found = true;
        break;
      }
      index += per_len[len];
      first = (first + per_len[len]) << 1;
    }
    if (!found) throw IntegrityError("huffman: invalid code");
  }
  return out;
}

Bytes deflate_encode(std::span<const std::uint8_t> bytes, int level) {
  z_stream zs{};
  if (deflateInit2(&zs, level, Z_DEFLATED, -15, 9, Z_DEFAULT_STRATEGY) != Z_OK)
    throw Error("deflate: init failed");
  Bytes out(deflateBound(&zs, static_cast<uLong>(bytes.size())) + 16);
  zs.next_in = const_cast<Bytef*>(bytes.data());
  zs.avail_in = static_cast<uInt>(bytes.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  out.resize(zs.total_out);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw Error("deflate: compression failed");
  return out;
}

Bytes deflate_decode(std::span<const std::uint8_t> stream) {
  z_stream zs{};
  if (inflateInit2(&zs, -15) != Z_OK) throw Error("inflate: init failed");
  zs.next_in = const_cast<Bytef*>(stream.data());
  zs.avail_in = static_cast<uInt>(stream.size());
  Bytes out;
  std::uint8_t chunk[16384];
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk;
    zs.avail_out = sizeof chunk;
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw IntegrityError("inflate: corrupt stream");
    }
    out.insert(out.end(), chunk, chunk + (sizeof chunk - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw IntegrityError("inflate: truncated stream");
    }
  }
  const bool trailing = zs.avail_in != 0;
  inflateEnd(&zs);
  if (trailing) throw IntegrityError("inflate: trailing bytes after stream end");
  return out;
}

void ByteWriter::u16(std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  out_.insert(out_.end(), s.begin(), s.end());
}
void ByteWriter::blob(std::span<const std::uint8_t> b) {
  u64(b.size());
  bytes(b);
}

void ByteReader::need(std::size_t n) const {
  if (n > remaining()) throw IntegrityError("unexpected end of data");
}
std::uint8_t ByteReader::u8() {
  need(1);
  return in_[pos_++];
}
std::uint16_t ByteReader::u16() {
  need(2);
  std::uint16_t v = static_cast<std::uint16_t>(in_[pos_] | (in_[pos_ + 1] << 8));
  pos_ += 2;
  return v;
}
std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}
std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}
float ByteReader::f32() { return std::bit_cast<float>(u32()); }
std::string ByteReader::str() {
  const std::uint32_t n = u32();
  auto b = bytes(n);
  return std::string(b.begin(), b.end());
}
std::span<const std::uint8_t> ByteReader::bytes(std::size_t n) {
  need(n);
  auto s = in_.subspan(pos_, n);
  pos_ += n;
  return s;
}
std::span<const std::uint8_t> ByteReader::blob() {
  const std::uint64_t n = u64();
  if (n > remaining()) throw IntegrityError("blob length exceeds data");
  return bytes(static_cast<std::size_t>(n));
}

std::size_t container_header_size(std::size_t sections) { return 4 + 2 + 4 + 9 * sections; }

Bytes write_container(const std::array<char, 4>& magic, std::uint16_t version,
                      const std::vector<Section>& sections) {
  ByteWriter w;
  for (char c : magic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(version);
  w.u32(static_cast<std::uint32_t>(sections.size()));
  for (const Section& s : sections) {
    w.u8(s.tag);
    w.u64(s.payload.size());
  }
  for (const Section& s : sections) w.bytes(s.payload);
  return w.take();
}

std::vector<Section> read_container(std::span<const std::uint8_t> bytes,
                                    const std::array<char, 4>& magic, std::uint16_t version) {
  ByteReader r(bytes);
  auto m = r.bytes(4);
  if (!std::equal(m.begin(), m.end(), magic.begin(),
                  [](std::uint8_t a, char b) { return a == static_cast<std::uint8_t>(b); }))
    throw IntegrityError("bad magic, not a " + std::string(magic.data(), 4) + " file");
  const std::uint16_t v = r.u16();
  if (v != version)
    throw IntegrityError("unsupported version " + std::to_string(v) + " (expected " +
                         std::to_string(version) + ")");
  const std::uint32_t count = r.u32();
  if (count > r.remaining() / 9) throw IntegrityError("section table exceeds file");
  std::vector<Section> sections(count);
  std::uint64_t total = 0;
  for (Section& s : sections) {
    s.tag = r.u8();
    const std::uint64_t len = r.u64();
    if (len > bytes.size()) throw IntegrityError("section length exceeds file");
    total += len;
    s.payload.resize(static_cast<std::size_t>(len));
  }
  if (total != r.remaining())
    throw IntegrityError("section lengths (" + std::to_string(total) + ") do not match payload (" +
                         std::to_string(r.remaining()) + " bytes)");
  for (Section& s : sections) {
    auto b = r.bytes(s.payload.size());
    std::copy(b.begin(), b.end(), s.payload.begin());
  }
  return sections;
}

}  // namespace vqnerv
