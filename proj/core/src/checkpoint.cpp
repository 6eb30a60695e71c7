#include "vqnerv/checkpoint.hpp"

#include <bit>

#include "vqnerv/codec.hpp"
#include "vqnerv/config.hpp"
#include "vqnerv/errors.hpp"

namespace vqnerv {

namespace {

enum : std::uint8_t { kConfig = 1, kParams = 2, kCodebook = 3, kMeta = 4, kMasks = 5 };

void put_tensor(ByteWriter& w, const Tensor& t) {
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (float v : t.data()) w.f32(v);
}

Tensor get_tensor(ByteReader& r) {
  const int rank = r.u8();
  Shape shape;
  for (int i = 0; i < rank; ++i) shape.push_back(static_cast<int>(r.u32()));
  const std::size_t n = rank ? shape_numel(shape) : 0;
  if (n * 4 > r.remaining()) throw IntegrityError("checkpoint tensor exceeds section");
  Tensor t = rank ? Tensor(shape) : Tensor();
  for (std::size_t i = 0; i < n; ++i) t[i] = r.f32();
  return t;
}

}  // namespace

ModelState capture(const Model& model) {
  ModelState s;
  for (const auto& [name, var] : model.params()) s.params.emplace_back(name, var.value());
  s.codebook = model.codebook().state();
  s.pool = model.codebook().pool();
  return s;
}

void restore(Model& model, const ModelState& state) {
  for (const auto& [name, value] : state.params) {
    if (!model.params().contains(name))
      throw IntegrityError("checkpoint parameter " + name + " is not part of the model");
    Var& var = model.params().get(name);
    if (var.shape() != value.shape())
      throw IntegrityError("checkpoint parameter " + name + " has shape " +
                           shape_str(value.shape()) + ", model expects " + shape_str(var.shape()));
    var.mutable_value() = value;
  }
  if (state.params.size() != model.params().size())
    throw IntegrityError("checkpoint has " + std::to_string(state.params.size()) +
                         " parameters, model has " + std::to_string(model.params().size()));
  model.codebook().state() = state.codebook;
  model.codebook().pool() = state.pool;
}

Bytes serialize_checkpoint(const Model& model, const CheckpointMeta& meta,
                           const PruneMasks& masks) {
  std::vector<Section> sections;
  {
    ByteWriter w;
    ModelConfig mc = model.config();
    mc.decoder_channels = model.plan().decoder_widths.front();
    w.str(echo(mc));
    w.str(meta.run_config);
    sections.push_back({kConfig, w.take()});
  }
  {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(model.params().size()));
    for (const auto& [name, var] : model.params()) {
      w.str(name);
      put_tensor(w, var.value());
    }
    sections.push_back({kParams, w.take()});
  }
  {
    ByteWriter w;
    const CodebookState& st = model.codebook().state();
    put_tensor(w, st.codes);
    put_tensor(w, st.ema_counts);
    put_tensor(w, st.ema_sums);
    w.f32(st.decay);
    w.f32(st.dead_threshold);
    w.u32(static_cast<std::uint32_t>(st.filled));
    w.u32(static_cast<std::uint32_t>(st.usage_counter.size()));
    for (std::int64_t c : st.usage_counter) w.u64(static_cast<std::uint64_t>(c));
    const FeaturePool& pool = model.codebook().pool();
    put_tensor(w, pool.nodes);
    put_tensor(w, pool.node_sizes);
    w.u32(static_cast<std::uint32_t>(pool.filled));
    sections.push_back({kCodebook, w.take()});
  }
  {
    ByteWriter w;
    w.u64(meta.seed);
    w.u32(static_cast<std::uint32_t>(meta.epoch));
    w.u64(std::bit_cast<std::uint64_t>(meta.best_psnr));
    sections.push_back({kMeta, w.take()});
  }
  {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(masks.size()));
    for (const auto& [name, keep] : masks) {
      w.str(name);
      w.u64(keep.size());
      w.bytes(keep);
    }
    sections.push_back({kMasks, w.take()});
  }
  return write_container(kCheckpointMagic, kCheckpointVersion, sections);
}

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const CheckpointMeta& meta, const PruneMasks& masks) {
  write_file(path, serialize_checkpoint(model, meta, masks));
}

LoadedCheckpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  std::vector<Section> sections = read_container(bytes, kCheckpointMagic, kCheckpointVersion);
  if (sections.size() != 5) throw IntegrityError("checkpoint must have 5 sections");
  for (std::size_t i = 0; i < sections.size(); ++i)
    if (sections[i].tag != i + 1) throw IntegrityError("checkpoint sections out of order");
  LoadedCheckpoint out;
  {
    ByteReader r(sections[0].payload);
    try {
      out.model_config = parse_model_config(r.str());
    } catch (const ConfigError& e) {
      throw IntegrityError(std::string("checkpoint config: ") + e.what());
    }
    out.meta.run_config = r.str();
  }
  {
    ByteReader r(sections[1].payload);
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string name = r.str();
      out.state.params.emplace_back(std::move(name), get_tensor(r));
    }
    if (!r.done()) throw IntegrityError("checkpoint params have trailing bytes");
  }
  {
    ByteReader r(sections[2].payload);
    CodebookState& st = out.state.codebook;
    st.codes = get_tensor(r);
    st.ema_counts = get_tensor(r);
    st.ema_sums = get_tensor(r);
    st.decay = r.f32();
    st.dead_threshold = r.f32();
    st.filled = static_cast<int>(r.u32());
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) st.usage_counter.push_back(static_cast<std::int64_t>(r.u64()));
    out.state.pool.nodes = get_tensor(r);
    out.state.pool.node_sizes = get_tensor(r);
    out.state.pool.filled = static_cast<int>(r.u32());
    if (!r.done()) throw IntegrityError("checkpoint codebook has trailing bytes");
  }
  {
    ByteReader r(sections[3].payload);
    out.meta.seed = r.u64();
    out.meta.epoch = static_cast<int>(r.u32());
    out.meta.best_psnr = std::bit_cast<double>(r.u64());
  }
  {
    ByteReader r(sections[4].payload);
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string name = r.str();
      const std::uint64_t len = r.u64();
      auto b = r.bytes(static_cast<std::size_t>(len));
      out.masks.emplace_back(std::move(name), std::vector<std::uint8_t>(b.begin(), b.end()));
    }
  }
  return out;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const Bytes bytes = read_file(path);
  return parse_checkpoint(bytes);
}

}  // namespace vqnerv
