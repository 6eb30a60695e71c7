#include "vqnerv/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include <spdlog/spdlog.h>

#include "vqnerv/errors.hpp"
#include "vqnerv/ops.hpp"
#include "vqnerv/optim.hpp"

namespace vqnerv {

namespace fs = std::filesystem;

void write_epoch_csv(std::ostream& os, const std::vector<EpochRecord>& rows) {
  os << "epoch,loss,psnr_db,ssim,usage,lr\n";
  for (const EpochRecord& r : rows)
    os << r.epoch << ',' << std::setprecision(8) << r.loss << ',' << std::fixed
       << std::setprecision(4) << r.psnr << ',' << std::setprecision(6) << r.ssim << ','
       << std::setprecision(4) << r.usage << ',' << std::scientific << std::setprecision(4)
       << r.lr << std::defaultfloat << '\n';
}

Evaluation score(const std::vector<Tensor>& outputs, const std::vector<Tensor>& targets,
                 const std::vector<int>& indices) {
  Evaluation ev;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    FrameMetrics m;
    m.frame_index = indices.empty() ? static_cast<int>(i) : indices[i];
    m.psnr_db = psnr(outputs[i], targets[i]);
    m.ssim = ssim(outputs[i], targets[i]);
    ev.psnr += m.psnr_db;
    ev.ssim += m.ssim;
    ev.frames.push_back(m);
  }
  if (!outputs.empty()) {
    ev.psnr /= static_cast<double>(outputs.size());
    ev.ssim /= static_cast<double>(outputs.size());
  }
  return ev;
}

Evaluation evaluate(Model& model, const TrainData& data) {
  NoGradGuard guard;
  if (model.config().use_vq) reset_usage(model.codebook().state());
  std::vector<FrameForward> fwd = model.forward_video(data.inputs, QuantMode::kCodebook);
  std::vector<Tensor> outputs;
  for (const FrameForward& f : fwd) outputs.push_back(f.reconstruction.value());
  Evaluation ev = score(outputs, data.targets, data.indices);
  ev.reconstructions = std::move(outputs);
  for (FrameForward& f : fwd) {
    ev.embeddings.push_back(f.embedding.value());
    ev.tokens.push_back(std::move(f.tokens));
  }
  if (model.config().use_vq) ev.usage = usage(model.codebook().state()).fraction;
  return ev;
}

namespace {

void reapply(Model& model, const PruneMasks* keep) {
  if (!keep) return;
  for (const auto& [name, mask] : *keep) apply_mask(model.params().get(name).mutable_value(), mask);
}

}  // namespace

TrainResult train_model(Model& model, const TrainData& data, const TrainSettings& s,
                        const std::function<void(const EpochRecord&)>& on_epoch) {
  if (data.inputs.empty()) throw ParameterError("train: no frames");
  if (data.inputs.size() != data.targets.size())
    throw ContractError("train: inputs and targets differ in length");
  if (s.epochs < 1) throw ParameterError("train: epochs must be >= 1");
  const bool inpaint = !data.mask.empty();
  const bool vq = model.config().use_vq;
  const int n = static_cast<int>(data.inputs.size());
  Adam adam(s.adam);
  Rng order_rng(s.seed ^ 0x5eedULL);
  const long total = static_cast<long>(s.epochs) * n;
  long step = 0;

  TrainResult result;
  ModelState best = capture(model);
  bool have_best = false;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= s.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng.engine());
    double loss_sum = 0.0;
    float lr = 0.0f;
    for (int i : order) {
      Tensor f_d_tm1;
      if (vq && i > 0) {
        NoGradGuard guard;
        f_d_tm1 = model.decode_trunk(model.encode_frame(Var(data.inputs[i - 1])).embedding)
                      .f_d.value();
      }
      FrameForward f = model.forward_frame(Var(data.inputs[i]), f_d_tm1, QuantMode::kCodebook);
      Var loss = inpaint ? inpainting_loss(f.reconstruction, data.targets[i], data.mask, s.alpha)
                         : reconstruction_loss(f.reconstruction, data.targets[i], s.alpha);
      if (f.vq_loss.defined()) loss = ops::add(loss, f.vq_loss);
      const float value = loss.value()[0];
      if (!std::isfinite(value)) {
        restore(model, best);
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + "; restored last good state");
      }
      model.params().zero_grad();
      loss.backward();
      lr = cosine_lr(step++, total, s.adam.lr);
      try {
        adam.step(model.params(), lr);
      } catch (const NumericError&) {
        restore(model, best);
        throw;
      }
      reapply(model, s.keep);
      if (vq) model.codebook().update(f.vq_features, f.tokens.indices);
      loss_sum += value;
      if (epoch == 1 && step == 1) result.first_loss = value;
    }
    if (epoch % s.eval_every == 0 || epoch == s.epochs) {
      Evaluation ev = evaluate(model, data);
      EpochRecord rec{epoch, loss_sum / n, ev.psnr, ev.ssim, ev.usage, lr};
      result.history.push_back(rec);
      if (!have_best || ev.psnr > result.best_psnr) {
        result.best_psnr = ev.psnr;
        result.best_epoch = epoch;
        best = capture(model);
        have_best = true;
      }
      if (on_epoch) on_epoch(rec);
    }
  }
  restore(model, best);
  return result;
}

PruneMasks prune_decoder(Model& model, double ratio) {
  std::vector<Tensor*> weights;
  std::vector<std::string> names;
  for (auto& [name, var] : model.params()) {
    if (!is_decode_side(name)) continue;
    if (name.size() < 7 || name.compare(name.size() - 7, 7, ".weight") != 0) continue;
    weights.push_back(&var.mutable_value());
    names.push_back(name);
  }
  auto masks = prune_global_l1(weights, ratio);
  PruneMasks out;
  for (std::size_t i = 0; i < names.size(); ++i) out.emplace_back(names[i], std::move(masks[i]));
  return out;
}

std::vector<Tensor> load_video(const RunConfig& c) {
  if (c.data_dir.empty()) {
    std::vector<Tensor> video =
        synthetic_video(c.synthetic_frames, c.model.height, c.model.width, c.synthetic_seed);
    return video;
  }
  std::optional<RawFormat> raw;
  if (c.raw_height > 0) raw = RawFormat{c.raw_height, c.raw_width};
  VideoDataset ds = load_frames(c.data_dir, {c.crop_height, c.crop_width}, raw);
  if (ds.height != c.model.height || ds.width != c.model.width)
    throw DataError("frames are " + std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                    " after crop, model expects " + std::to_string(c.model.height) + "x" +
                    std::to_string(c.model.width));
  return std::move(ds.frames);
}

Tensor make_mask(const RunConfig& c, int height, int width) {
  if (c.mask_kind == MaskKind::kDisperse)
    return make_disperse_mask(height, width, c.disperse_fraction, c.mask_seed);
  const int w = c.mask_width > 0 ? c.mask_width : scaled_box_width(width);
  return make_box_mask(height, width, c.mask_boxes, w, c.mask_seed);
}

TrainData make_train_data(const RunConfig& c, const std::vector<Tensor>& video,
                          const std::vector<int>& indices) {
  TrainData d;
  d.indices = indices;
  if (c.task == Task::kInpaint && !video.empty())
    d.mask = make_mask(c, video.front().dim(1), video.front().dim(2));
  for (int i : indices) {
    d.targets.push_back(video.at(i));
    d.inputs.push_back(d.mask.empty() ? video.at(i) : apply_mask(video.at(i), d.mask));
  }
  return d;
}

TrainSettings train_settings(const RunConfig& c, int epochs) {
  TrainSettings s;
  s.epochs = epochs;
  s.adam = c.adam;
  s.alpha = c.loss.alpha;
  s.eval_every = c.eval_every;
  s.seed = c.seed;
  return s;
}

CompressionResult compress(Model& model, const TrainData& data, const RunConfig& c) {
  CompressionResult r;
  r.float_psnr = evaluate(model, data).psnr;
  r.pruned_psnr = r.float_psnr;
  if (c.prune_ratio > 0.0f) {
    r.masks = prune_decoder(model, c.prune_ratio);
    const int ft = c.resolved_finetune_epochs();
    if (ft > 0) {
      TrainSettings s = train_settings(c, ft);
      s.keep = &r.masks;
      s.seed = c.seed + 1;
      r.finetune = train_model(model, data, s).history;
    }
    r.pruned_psnr = evaluate(model, data).psnr;
  }
  std::vector<QuantizedWeight> weights = quantize_decoder(model, r.masks);
  r.artifacts = encode_video(model, data.inputs, std::move(weights));
  r.reconstructions = reconstruct(model, r.artifacts);
  Evaluation q = score(r.reconstructions, data.targets, data.indices);
  r.quantized_psnr = q.psnr;
  r.quantized_ssim = q.ssim;
  r.packed = pack(r.artifacts);
  r.packed.report.psnr = q.psnr;
  r.packed.report.ssim = q.ssim;
  return r;
}

namespace {

void prepare_dir(const RunConfig& c) {
  std::error_code ec;
  fs::create_directories(c.out_dir, ec);
  if (ec) throw DataError("cannot create " + c.out_dir + ": " + ec.message());
  std::ofstream(fs::path(c.out_dir) / "config.txt") << echo(c);
}

template <typename F>
void write_text(const fs::path& path, F&& body) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  body(os);
}

std::vector<int> train_indices(const RunConfig& c, int frames) {
  return c.task == Task::kInterpolate ? even_odd_split(frames).train : all_split(frames).train;
}

void log_epoch(const EpochRecord& r) {
  spdlog::info("epoch {:4d}  loss {:.5f}  psnr {:.3f}  ssim {:.4f}  usage {:.2f}", r.epoch,
               r.loss, r.psnr, r.ssim, r.usage);
}

CheckpointMeta meta_for(const RunConfig& c, const TrainResult& t) {
  return {echo(c), c.seed, t.best_epoch, t.best_psnr};
}

void save_frames(const fs::path& dir, const std::vector<Tensor>& frames,
                 const std::vector<int>& indices) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    std::ostringstream name;
    name << "frame_" << std::setw(4) << std::setfill('0')
         << (indices.empty() ? static_cast<int>(i) : indices[i]) << ".png";
    write_png(dir / name.str(), frames[i]);
  }
}

struct Trained {
  std::unique_ptr<Model> model;
  TrainResult result;
  TrainData data;
  std::vector<Tensor> video;
};

Trained train_run(const RunConfig& c) {
  Trained t;
  t.video = load_video(c);
  t.data = make_train_data(c, t.video, train_indices(c, static_cast<int>(t.video.size())));
  if (t.data.inputs.empty()) throw DataError("no training frames");
  t.model = std::make_unique<Model>(c.model, c.seed);
  spdlog::info("decoder parameters {} (budget {})", t.model->decoder_parameter_count(),
               c.model.decoder_budget);
  const fs::path out(c.out_dir);
  try {
    t.result = train_model(*t.model, t.data, train_settings(c, c.epochs), log_epoch);
  } catch (const NumericError&) {
    save_checkpoint(out / "checkpoint.vqnc", *t.model, {echo(c), c.seed, 0, 0.0});
    throw;
  }
  write_text(out / "metrics.csv", [&](std::ostream& os) { write_epoch_csv(os, t.result.history); });
  save_checkpoint(out / "checkpoint.vqnc", *t.model, meta_for(c, t.result));
  return t;
}

std::unique_ptr<Model> model_from_checkpoint(const fs::path& path, PruneMasks* masks = nullptr) {
  LoadedCheckpoint ck = load_checkpoint(path);
  auto model = std::make_unique<Model>(ck.model_config, ck.meta.seed);
  restore(*model, ck.state);
  if (masks) *masks = std::move(ck.masks);
  return model;
}

}  // namespace

RunSummary run_train(const RunConfig& c) {
  prepare_dir(c);
  Trained t = train_run(c);
  Evaluation ev = evaluate(*t.model, t.data);
  write_text(fs::path(c.out_dir) / "frames.csv",
             [&](std::ostream& os) { write_metrics_csv(os, ev.frames); });
  if (c.save_frames) save_frames(fs::path(c.out_dir) / "frames", ev.reconstructions, t.data.indices);
  return {ev.psnr, ev.ssim, std::nullopt};
}

RunSummary run_eval(const RunConfig& c, const fs::path& checkpoint) {
  prepare_dir(c);
  auto model = model_from_checkpoint(checkpoint);
  const std::vector<Tensor> video = load_video(c);
  std::vector<int> idx(video.size());
  std::iota(idx.begin(), idx.end(), 0);
  TrainData data = make_train_data(c, video, idx);
  Evaluation ev = evaluate(*model, data);
  write_text(fs::path(c.out_dir) / "frames.csv",
             [&](std::ostream& os) { write_metrics_csv(os, ev.frames); });
  if (c.save_frames) save_frames(fs::path(c.out_dir) / "frames", ev.reconstructions, data.indices);
  return {ev.psnr, ev.ssim, std::nullopt};
}

RunSummary run_encode(const RunConfig& c, const fs::path& checkpoint) {
  prepare_dir(c);
  std::unique_ptr<Model> model;
  TrainData data;
  if (checkpoint.empty()) {
    Trained t = train_run(c);
    model = std::move(t.model);
    data = std::move(t.data);
  } else {
    model = model_from_checkpoint(checkpoint);
    const std::vector<Tensor> video = load_video(c);
    std::vector<int> idx(video.size());
    std::iota(idx.begin(), idx.end(), 0);
    RunConfig regress = c;
    regress.task = Task::kRegress;
    data = make_train_data(regress, video, idx);
  }
  CompressionResult r = compress(*model, data, c);
  const fs::path out(c.out_dir);
  write_file(out / "bitstream.vqnv", r.packed.bytes);
  write_text(out / "report.csv", [&](std::ostream& os) { write_report_csv(os, r.packed.report); });
  write_text(out / "report.txt", [&](std::ostream& os) { write_report_text(os, r.packed.report); });
  Evaluation q = score(r.reconstructions, data.targets, data.indices);
  write_text(out / "frames.csv", [&](std::ostream& os) { write_metrics_csv(os, q.frames); });
  if (!r.finetune.empty() || checkpoint.empty() == false)
    write_text(out / "metrics.csv", [&](std::ostream& os) { write_epoch_csv(os, r.finetune); });
  save_checkpoint(out / "checkpoint.vqnc", *model, {echo(c), c.seed, 0, r.quantized_psnr},
                  r.masks);
  spdlog::info("float {:.3f} dB, pruned {:.3f} dB, 8-bit {:.3f} dB, {} bytes, {:.5f} bpp",
               r.float_psnr, r.pruned_psnr, r.quantized_psnr, r.packed.report.total_bytes,
               r.packed.report.bpp);
  return {r.quantized_psnr, r.quantized_ssim, r.packed.report};
}

RunSummary run_decode(const fs::path& bitstream, const fs::path& out_dir,
                      const RunConfig* ground_truth) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());
  const Bytes bytes = read_file(bitstream);
  std::vector<Tensor> truth;
  if (ground_truth) truth = load_video(*ground_truth);
  DecodedVideo dv = decode_video(bytes, ground_truth ? &truth : nullptr);
  save_frames(out_dir / "frames", dv.frames, {});
  write_text(out_dir / "report.csv", [&](std::ostream& os) { write_report_csv(os, dv.report); });
  write_text(out_dir / "report.txt", [&](std::ostream& os) { write_report_text(os, dv.report); });
  RunSummary s;
  if (ground_truth) {
    Evaluation ev = score(dv.frames, truth, {});
    write_text(out_dir / "frames.csv", [&](std::ostream& os) { write_metrics_csv(os, ev.frames); });
    s.psnr = ev.psnr;
    s.ssim = ev.ssim;
  }
  s.report = dv.report;
  return s;
}

InpaintSummary run_inpaint(const RunConfig& config) {
  RunConfig c = config;
  c.task = Task::kInpaint;
  prepare_dir(c);
  Trained t = train_run(c);
  Evaluation model_ev = evaluate(*t.model, t.data);
  Evaluation input_ev = score(t.data.inputs, t.data.targets, t.data.indices);
  InpaintSummary s{input_ev.psnr, model_ev.psnr, model_ev.ssim};
  write_text(fs::path(c.out_dir) / "inpaint.csv", [&](std::ostream& os) {
    os << "method,psnr_db,ssim\n"
       << std::fixed << "Input," << std::setprecision(4) << input_ev.psnr << ','
       << std::setprecision(6) << input_ev.ssim << '\n'
       << "Model," << std::setprecision(4) << model_ev.psnr << ',' << std::setprecision(6)
       << model_ev.ssim << '\n';
  });
  write_text(fs::path(c.out_dir) / "frames.csv",
             [&](std::ostream& os) { write_metrics_csv(os, model_ev.frames); });
  if (c.save_frames) {
    save_frames(fs::path(c.out_dir) / "frames", model_ev.reconstructions, t.data.indices);
    save_frames(fs::path(c.out_dir) / "masked", t.data.inputs, t.data.indices);
  }
  spdlog::info("inpainting: input {:.3f} dB, model {:.3f} dB", s.input_psnr, s.model_psnr);
  return s;
}

InterpSummary interpolate_odd(Model& model, const std::vector<Tensor>& video) {
  const int frames = static_cast<int>(video.size());
  const Split split = even_odd_split(frames);
  if (split.train.size() < 2) throw DataError("interpolation needs at least 2 even frames");
  NoGradGuard guard;
  TrainData even;
  for (int i : split.train) {
    even.inputs.push_back(video[i]);
    even.targets.push_back(video[i]);
    even.indices.push_back(i);
  }
  Evaluation train_ev = evaluate(model, even);
  InterpSummary s;
  s.train_psnr = train_ev.psnr;
  for (int t : split.test) {
    const int lo = (t - 1) / 2, hi = (t + 1) / 2;
    Tensor emb = train_ev.embeddings[lo];
    if (hi < static_cast<int>(split.train.size())) {
      const Tensor& b = train_ev.embeddings[hi];
      for (std::size_t k = 0; k < emb.size(); ++k) emb[k] = 0.5f * (emb[k] + b[k]);
    }
    const Tensor out = model.decode_frame(emb, train_ev.tokens[lo]);
    s.rows.push_back({t, psnr(out, video[t]), ssim(out, video[t])});
    s.test_psnr += s.rows.back().psnr_db;
  }
  if (!s.rows.empty()) s.test_psnr /= static_cast<double>(s.rows.size());
  return s;
}

InterpSummary run_interp(const RunConfig& config) {
  RunConfig c = config;
  c.task = Task::kInterpolate;
  prepare_dir(c);
  Trained t = train_run(c);
  InterpSummary s = interpolate_odd(*t.model, t.video);
  write_text(fs::path(c.out_dir) / "interp.csv",
             [&](std::ostream& os) { write_metrics_csv(os, s.rows); });
  write_text(fs::path(c.out_dir) / "interp_summary.txt", [&](std::ostream& os) {
    os << std::fixed << std::setprecision(4) << "train_psnr_db = " << s.train_psnr << '\n'
       << "test_psnr_db = " << s.test_psnr << '\n';
  });
  spdlog::info("interpolation: train {:.3f} dB, test {:.3f} dB", s.train_psnr, s.test_psnr);
  return s;
}

std::vector<RdPoint> run_rd_curve(const RunConfig& config) {
  if (config.rd_budgets.size() < 2) throw ConfigError("rd-curve needs at least 2 budgets");
  prepare_dir(config);
  std::vector<RdPoint> points;
  for (double budget : config.rd_budgets) {
    RunConfig c = config;
    c.task = Task::kRegress;
    c.model.decoder_budget = budget;
    c.model.decoder_channels = 0;
    std::ostringstream sub;
    sub << "budget_" << static_cast<long long>(std::llround(budget));
    c.out_dir = (fs::path(config.out_dir) / sub.str()).string();
    prepare_dir(c);
    Trained t = train_run(c);
    CompressionResult r = compress(*t.model, t.data, c);
    write_file(fs::path(c.out_dir) / "bitstream.vqnv", r.packed.bytes);
    write_text(fs::path(c.out_dir) / "report.csv",
               [&](std::ostream& os) { write_report_csv(os, r.packed.report); });
    points.push_back({budget, r.packed.report.total_bytes, r.packed.report.bpp, r.quantized_psnr,
                      r.quantized_ssim});
    spdlog::info("budget {:.0f}: {} bytes, {:.5f} bpp, {:.3f} dB", budget,
                 r.packed.report.total_bytes, r.packed.report.bpp, r.quantized_psnr);
  }
  write_text(fs::path(config.out_dir) / "rd.csv", [&](std::ostream& os) {
    os << "budget,total_bytes,bpp,psnr,ssim\n";
    for (const RdPoint& p : points)
      os << std::fixed << std::setprecision(0) << p.budget << ',' << p.total_bytes << ','
         << std::setprecision(6) << p.bpp << ',' << std::setprecision(4) << p.psnr << ','
         << std::setprecision(6) << p.ssim << '\n';
  });
  return points;
}

}  // namespace vqnerv
