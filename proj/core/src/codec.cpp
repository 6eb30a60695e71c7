#include "vqnerv/codec.hpp"

#include <fstream>
#include <iomanip>
#include <map>

#include "vqnerv/config.hpp"
#include "vqnerv/errors.hpp"
#include "vqnerv/losses.hpp"

namespace vqnerv {

bool QuantizedWeight::operator==(const QuantizedWeight& o) const {
  return name == o.name && tensor.shape == o.tensor.shape && tensor.codes == o.tensor.codes &&
         tensor.min == o.tensor.min && tensor.scale == o.tensor.scale && keep == o.keep;
}

namespace {

void write_quant_header(ByteWriter& w, const QuantizedTensor& q) {
  w.f32(q.min);
  w.f32(q.scale);
}

Bytes pack_bits(const std::vector<std::uint8_t>& flags) {
  Bytes out((flags.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < flags.size(); ++i)
    if (flags[i]) out[i >> 3] |= static_cast<std::uint8_t>(0x80u >> (i & 7));
  return out;
}

std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> bits, std::size_t n) {
  if (bits.size() * 8 < n) throw IntegrityError("mask bitmap too short");
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (bits[i >> 3] >> (7 - (i & 7))) & 1u;
  return out;
}

int token_index_bytes(int table_rows) { return table_rows <= 256 ? 1 : 2; }

}  // namespace

Packed pack(const Artifacts& a) {
  const ModelPlan plan = solve_plan(a.config);
  const int frames = a.frames();
  if (a.tokens.size() != a.embeddings.size())
    throw ContractError("pack: token and embedding frame counts differ");
  Packed out;
  CompressionReport& r = out.report;
  std::vector<Section> sections;

  {
    ByteWriter w;
    w.str(echo(a.config));
    w.u32(static_cast<std::uint32_t>(frames));
    sections.push_back({kSectionConfig, w.take()});
  }

  {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(a.weights.size()));
    std::vector<std::uint8_t> mask_flags;
    Bytes codes;
    for (const QuantizedWeight& qw : a.weights) {
      w.str(qw.name);
      w.u8(static_cast<std::uint8_t>(qw.tensor.shape.size()));
      for (int d : qw.tensor.shape) w.u32(static_cast<std::uint32_t>(d));
      write_quant_header(w, qw.tensor);
      w.u8(qw.keep.empty() ? 0 : 1);
      if (!qw.keep.empty() && qw.keep.size() != qw.tensor.codes.size())
        throw ContractError("pack: mask size mismatch for " + qw.name);
      for (std::size_t i = 0; i < qw.tensor.codes.size(); ++i) {
        if (!qw.keep.empty()) mask_flags.push_back(qw.keep[i]);
        if (qw.keep.empty() || qw.keep[i]) codes.push_back(qw.tensor.codes[i]);
      }
    }
    w.blob(deflate_encode(pack_bits(mask_flags)));
    w.blob(huffman_encode(codes));
    r.raw_weight_bytes = codes.size();
    sections.push_back({kSectionWeights, w.take()});
  }

  {
    ByteWriter w;
    for (const QuantizedTensor& e : a.embeddings) {
      if (e.shape != plan.embedding_shape)
        throw ContractError("pack: embedding shape " + shape_str(e.shape) + " != " +
                            shape_str(plan.embedding_shape));
      write_quant_header(w, e);
      w.bytes(e.codes);
    }
    r.raw_embedding_bytes = w.data().size();
    sections.push_back({kSectionEmbeddings, frames ? deflate_encode(w.data()) : Bytes{}});
  }

  // Compact the codebook to the codes tokens actually use, in first-use order.
  std::vector<int> remap{0};
  std::map<int, int> compact{{0, 0}};
  for (const TokenGrid& g : a.tokens)
    for (int idx : g.indices)
      if (compact.emplace(idx, static_cast<int>(remap.size())).second) remap.push_back(idx);
  const int rows = static_cast<int>(remap.size());
  r.used_codes = rows - 1;

  {
    ByteWriter w;
    const int width = token_index_bytes(rows);
    for (const TokenGrid& g : a.tokens) {
      if (g.height != plan.token_height || g.width != plan.token_width)
        throw ContractError("pack: token grid does not match the model");
      for (int idx : g.indices) {
        const int c = compact.at(idx);
        if (width == 1) w.u8(static_cast<std::uint8_t>(c));
        else w.u16(static_cast<std::uint16_t>(c));
      }
    }
    r.raw_token_bytes = w.data().size();
    sections.push_back({kSectionTokens, frames && r.raw_token_bytes ? deflate_encode(w.data()) : Bytes{}});
  }

  {
    ByteWriter w;
    if (a.config.use_vq) {
      const int d = a.codebook.empty() ? 0 : a.codebook.dim(1);
      w.u16(static_cast<std::uint16_t>(rows - 1));
      w.u16(static_cast<std::uint16_t>(d));
      for (int k = 1; k < rows; ++k) {
        if (remap[k] < 0 || remap[k] >= a.codebook.dim(0))
          throw IntegrityError("pack: token references missing code " + std::to_string(remap[k]));
        for (int j = 0; j < d; ++j) w.f32(a.codebook[static_cast<std::size_t>(remap[k]) * d + j]);
      }
      for (int k = 1; k < rows; ++k) w.u16(static_cast<std::uint16_t>(remap[k]));
    }
    sections.push_back({kSectionCodebook, w.take()});
  }

  r.config_bytes = sections[0].payload.size();
  r.weight_bytes = sections[1].payload.size();
  r.embedding_bytes = sections[2].payload.size();
  r.token_bytes = sections[3].payload.size();
  r.codebook_bytes = sections[4].payload.size();
  for (const Section& s : sections) r.total_bytes += s.payload.size();
  r.file_bytes = r.total_bytes + container_header_size(sections.size());
  r.frames = frames;
  r.height = a.config.height;
  r.width = a.config.width;
  r.bpp = frames ? 8.0 * static_cast<double>(r.total_bytes) /
                       (static_cast<double>(frames) * r.height * r.width)
                 : 0.0;
  out.bytes = write_container(kBitstreamMagic, kBitstreamVersion, sections);
  return out;
}

Unpacked unpack(std::span<const std::uint8_t> bytes) {
  std::vector<Section> sections = read_container(bytes, kBitstreamMagic, kBitstreamVersion);
  std::map<std::uint8_t, const Section*> by_tag;
  for (const Section& s : sections)
    if (!by_tag.emplace(s.tag, &s).second)
      throw IntegrityError("duplicate section tag " + std::to_string(s.tag));
  for (std::uint8_t t : {kSectionConfig, kSectionWeights, kSectionEmbeddings, kSectionTokens,
                         kSectionCodebook})
    if (!by_tag.count(t)) throw IntegrityError("missing section " + std::to_string(t));

  Unpacked out;
  Artifacts& a = out.artifacts;
  CompressionReport& r = out.report;
  int frames = 0;
  {
    ByteReader rd(by_tag[kSectionConfig]->payload);
    try {
      a.config = parse_model_config(rd.str());
    } catch (const ConfigError& e) {
      throw IntegrityError(std::string("config section: ") + e.what());
    }
    frames = static_cast<int>(rd.u32());
    if (!rd.done()) throw IntegrityError("config section has trailing bytes");
  }
  const ModelPlan plan = solve_plan(a.config);

  {
    ByteReader rd(by_tag[kSectionWeights]->payload);
    const std::uint32_t count = rd.u32();
    std::size_t mask_total = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
      QuantizedWeight qw;
      qw.name = rd.str();
      const int rank = rd.u8();
      for (int k = 0; k < rank; ++k) qw.tensor.shape.push_back(static_cast<int>(rd.u32()));
      qw.tensor.min = rd.f32();
      qw.tensor.scale = rd.f32();
      const bool masked = rd.u8() != 0;
      const std::size_t n = shape_numel(qw.tensor.shape);
      qw.tensor.codes.resize(n);
      if (masked) {
        qw.keep.resize(n);
        mask_total += n;
      }
      a.weights.push_back(std::move(qw));
    }
    const std::vector<std::uint8_t> flags = unpack_bits(deflate_decode(rd.blob()), mask_total);
    const Bytes codes = huffman_decode(rd.blob());
    if (!rd.done()) throw IntegrityError("weights section has trailing bytes");
    std::size_t f = 0, c = 0;
    for (QuantizedWeight& qw : a.weights) {
      for (std::size_t i = 0; i < qw.tensor.codes.size(); ++i) {
        if (!qw.keep.empty()) qw.keep[i] = flags[f++];
        if (qw.keep.empty() || qw.keep[i]) {
          if (c >= codes.size()) throw IntegrityError("weight codes truncated");
          qw.tensor.codes[i] = codes[c++];
        }
      }
    }
    if (c != codes.size()) throw IntegrityError("weight code count mismatch");
    r.raw_weight_bytes = codes.size();
  }

  const int emb_n = static_cast<int>(shape_numel(plan.embedding_shape));
  {
    const Section& s = *by_tag[kSectionEmbeddings];
    const Bytes raw = s.payload.empty() ? Bytes{} : deflate_decode(s.payload);
    if (raw.size() != static_cast<std::size_t>(frames) * (8 + emb_n))
      throw IntegrityError("embedding section size does not match " + std::to_string(frames) +
                           " frames");
    ByteReader rd(raw);
    for (int t = 0; t < frames; ++t) {
      QuantizedTensor q;
      q.shape = plan.embedding_shape;
      q.min = rd.f32();
      q.scale = rd.f32();
      auto b = rd.bytes(emb_n);
      q.codes.assign(b.begin(), b.end());
      a.embeddings.push_back(std::move(q));
    }
    r.raw_embedding_bytes = raw.size();
  }

  int rows = 1;
  {
    ByteReader rd(by_tag[kSectionCodebook]->payload);
    out.remap = {0};
    if (a.config.use_vq) {
      const int used = rd.u16();
      const int d = rd.u16();
      if (d != a.config.codebook.dim) throw IntegrityError("codebook dim mismatch");
      rows = used + 1;
      a.codebook = Tensor::zeros({rows, d});
      for (int k = 1; k < rows; ++k)
        for (int j = 0; j < d; ++j) a.codebook[static_cast<std::size_t>(k) * d + j] = rd.f32();
      for (int k = 1; k < rows; ++k) out.remap.push_back(rd.u16());
    }
    if (!rd.done()) throw IntegrityError("codebook section has trailing bytes");
    r.used_codes = rows - 1;
  }

  {
    const Section& s = *by_tag[kSectionTokens];
    const Bytes raw = s.payload.empty() ? Bytes{} : deflate_decode(s.payload);
    const int per_frame = plan.token_height * plan.token_width;
    const int width = token_index_bytes(rows);
    if (raw.size() != static_cast<std::size_t>(frames) * per_frame * width)
      throw IntegrityError("token section size does not match " + std::to_string(frames) +
                           " frames");
    ByteReader rd(raw);
    for (int t = 0; t < frames; ++t) {
      TokenGrid g;
      g.height = plan.token_height;
      g.width = plan.token_width;
      for (int k = 0; k < per_frame; ++k) {
        const int idx = width == 1 ? rd.u8() : rd.u16();
        if (idx >= rows)
          throw IntegrityError("token " + std::to_string(idx) + " references a code missing from "
                               "the " + std::to_string(rows) + "-entry table");
        g.indices.push_back(idx);
      }
      a.tokens.push_back(std::move(g));
    }
    r.raw_token_bytes = raw.size();
  }

  r.config_bytes = by_tag[kSectionConfig]->payload.size();
  r.weight_bytes = by_tag[kSectionWeights]->payload.size();
  r.embedding_bytes = by_tag[kSectionEmbeddings]->payload.size();
  r.token_bytes = by_tag[kSectionTokens]->payload.size();
  r.codebook_bytes = by_tag[kSectionCodebook]->payload.size();
  for (const Section& s : sections) r.total_bytes += s.payload.size();
  r.file_bytes = bytes.size();
  r.frames = frames;
  r.height = a.config.height;
  r.width = a.config.width;
  r.bpp = frames ? 8.0 * static_cast<double>(r.total_bytes) /
                       (static_cast<double>(frames) * r.height * r.width)
                 : 0.0;
  return out;
}

std::vector<QuantizedWeight> quantize_decoder(
    Model& model, const std::vector<std::pair<std::string, std::vector<std::uint8_t>>>& keep) {
  std::map<std::string, const std::vector<std::uint8_t>*> masks;
  for (const auto& [name, m] : keep) masks[name] = &m;
  std::vector<QuantizedWeight> out;
  for (auto& [name, var] : model.params()) {
    if (!is_decode_side(name)) continue;
    QuantizedWeight qw;
    qw.name = name;
    Tensor& value = var.mutable_value();
    if (auto it = masks.find(name); it != masks.end()) {
      qw.keep = *it->second;
      apply_mask(value, qw.keep);
    }
    qw.tensor = quantize_8bit(value);
    // Pruned codes are never transmitted; zero them so unpack is bit-exact.
    for (std::size_t i = 0; i < qw.keep.size(); ++i)
      if (!qw.keep[i]) qw.tensor.codes[i] = 0;
    out.push_back(std::move(qw));
  }
  load_decoder(model, out, Tensor());
  return out;
}

void load_decoder(Model& model, const std::vector<QuantizedWeight>& weights,
                  const Tensor& codebook) {
  for (const QuantizedWeight& qw : weights) {
    if (!model.params().contains(qw.name))
      throw IntegrityError("bitstream weight " + qw.name + " is not part of the model");
    Var& var = model.params().get(qw.name);
    if (var.shape() != qw.tensor.shape)
      throw IntegrityError("bitstream weight " + qw.name + " has shape " +
                           shape_str(qw.tensor.shape) + ", model expects " +
                           shape_str(var.shape()));
    Tensor value = dequantize(qw.tensor);
    if (!qw.keep.empty()) apply_mask(value, qw.keep);
    var.mutable_value() = std::move(value);
  }
  std::size_t expected = 0;
  for (const auto& [name, var] : model.params()) expected += is_decode_side(name) ? 1 : 0;
  if (weights.size() != expected)
    throw IntegrityError("bitstream carries " + std::to_string(weights.size()) +
                         " decoder tensors, model has " + std::to_string(expected));
  if (!codebook.empty()) {
    CodebookState& st = model.codebook().state();
    if (codebook.dim(1) != model.config().codebook.dim)
      throw IntegrityError("codebook dim mismatch");
    st.codes = codebook;
    st.ema_counts = Tensor::zeros({codebook.dim(0)});
    st.ema_sums = Tensor::zeros(codebook.shape());
    st.usage_counter.assign(codebook.dim(0), 0);
    st.filled = codebook.dim(0);
  }
}

Artifacts encode_video(Model& model, const std::vector<Tensor>& frames,
                       std::vector<QuantizedWeight> weights) {
  NoGradGuard guard;
  Artifacts a;
  a.config = model.config();
  a.config.decoder_channels = model.plan().decoder_widths.front();
  a.weights = std::move(weights);
  std::vector<Tensor> dequantized;
  std::vector<Var> f_e;
  for (const Tensor& frame : frames) {
    Model::Encoded e = model.encode_frame(Var(frame));
    a.embeddings.push_back(quantize_8bit(e.embedding.value()));
    dequantized.push_back(dequantize(a.embeddings.back()));
    f_e.push_back(e.f_e);
  }
  if (model.config().use_vq) {
    Tensor prev;
    for (std::size_t t = 0; t < frames.size(); ++t) {
      Var f_d = model.decode_trunk(Var(dequantized[t])).f_d;
      Var f_d_tm1 = prev.empty() ? f_d : Var(prev);
      a.tokens.push_back(model.vq_block(f_e[t], f_d, f_d_tm1, QuantMode::kCodebook).tokens);
      prev = f_d.value();
    }
    a.codebook = model.codebook().state().codes;
  } else {
    a.tokens.assign(frames.size(), TokenGrid{});
  }
  return a;
}

std::vector<Tensor> reconstruct(const Model& model, const Artifacts& artifacts) {
  std::vector<Tensor> out;
  for (int t = 0; t < artifacts.frames(); ++t)
    out.push_back(model.decode_frame(dequantize(artifacts.embeddings[t]), artifacts.tokens[t]));
  return out;
}

DecodedVideo decode_video(std::span<const std::uint8_t> bytes,
                          const std::vector<Tensor>* ground_truth) {
  Unpacked u = unpack(bytes);
  Model model(u.artifacts.config, 0);
  load_decoder(model, u.artifacts.weights, u.artifacts.codebook);
  DecodedVideo out;
  out.frames = reconstruct(model, u.artifacts);
  out.report = u.report;
  if (ground_truth) {
    if (ground_truth->size() != out.frames.size())
      throw DataError("ground truth has " + std::to_string(ground_truth->size()) +
                      " frames, bitstream has " + std::to_string(out.frames.size()));
    double p = 0.0, s = 0.0;
    for (std::size_t t = 0; t < out.frames.size(); ++t) {
      p += psnr(out.frames[t], (*ground_truth)[t]);
      s += ssim(out.frames[t], (*ground_truth)[t]);
    }
    if (!out.frames.empty()) {
      out.report.psnr = p / static_cast<double>(out.frames.size());
      out.report.ssim = s / static_cast<double>(out.frames.size());
    }
  }
  return out;
}

void write_report_csv(std::ostream& os, const CompressionReport& r) {
  os << "frames,height,width,config_bytes,weight_bytes,embedding_bytes,token_bytes,"
        "codebook_bytes,raw_embedding_bytes,raw_token_bytes,used_codes,total_bytes,file_bytes,"
        "bpp,psnr,ssim\n";
  os << r.frames << ',' << r.height << ',' << r.width << ',' << r.config_bytes << ','
     << r.weight_bytes << ',' << r.embedding_bytes << ',' << r.token_bytes << ','
     << r.codebook_bytes << ',' << r.raw_embedding_bytes << ',' << r.raw_token_bytes << ','
     << r.used_codes << ',' << r.total_bytes << ',' << r.file_bytes << ',' << std::fixed
     << std::setprecision(6) << r.bpp << ',';
  if (r.psnr) os << std::setprecision(4) << *r.psnr;
  os << ',';
  if (r.ssim) os << std::setprecision(6) << *r.ssim;
  os << '\n';
  os.unsetf(std::ios::fixed);
}

void write_report_text(std::ostream& os, const CompressionReport& r) {
  os << "frames          " << r.frames << " (" << r.height << "x" << r.width << ")\n"
     << "decoder         " << r.decoder_bytes() << " B (config " << r.config_bytes
     << ", weights " << r.weight_bytes << ")\n"
     << "embeddings      " << r.embedding_bytes << " B (raw " << r.raw_embedding_bytes << ")\n"
     << "tokens          " << r.token_bytes << " B (raw " << r.raw_token_bytes << ")\n"
     << "codebook        " << r.codebook_bytes << " B (" << r.used_codes << " codes)\n"
     << "total           " << r.total_bytes << " B (file " << r.file_bytes << " B)\n"
     << std::fixed << std::setprecision(6) << "bpp             " << r.bpp << '\n';
  if (r.psnr) os << std::setprecision(3) << "psnr            " << *r.psnr << " dB\n";
  if (r.ssim) os << std::setprecision(5) << "ssim            " << *r.ssim << '\n';
  os.unsetf(std::ios::fixed);
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace vqnerv
