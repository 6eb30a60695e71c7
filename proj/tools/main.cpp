#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "vqnerv/config.hpp"
#include "vqnerv/data.hpp"
#include "vqnerv/errors.hpp"
#include "vqnerv/pipeline.hpp"

namespace fs = std::filesystem;
using namespace vqnerv;

namespace {

enum Exit { kOk = 0, kUsage = 1, kConfig = 2, kData = 3, kNumeric = 4, kInternal = 5 };

struct Common {
  std::string config;
  std::string out;
  long long seed = -1;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", c.out, "output directory");
  cmd->add_option("--seed", c.seed, "run seed");
  cmd->add_option("--set", c.sets, "override, key=value (repeatable)");
}

RunConfig resolve(const Common& c) {
  KeyValues overrides;
  for (const std::string& s : c.sets) overrides.push_back(parse_override(s));
  if (c.seed >= 0) overrides.emplace_back("seed", std::to_string(c.seed));
  if (!c.out.empty()) overrides.emplace_back("out_dir", c.out);
  return load_run_config(c.config, overrides);
}

void print_summary(const RunSummary& s) {
  if (s.psnr) std::printf("psnr_db %.4f\nssim %.6f\n", *s.psnr, *s.ssim);
  if (s.report)
    std::printf("total_bytes %zu\nbpp %.6f\n", static_cast<std::size_t>(s.report->total_bytes),
                s.report->bpp);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VQ-NeRV neural video codec"};
  app.require_subcommand(1);
  app.fallthrough();
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "debug logging");
  app.add_flag("-q,--quiet", quiet, "warnings and errors only");

  Common train_opts, encode_opts, eval_opts, inpaint_opts, interp_opts, rd_opts, decode_opts,
      synth_opts;
  std::string checkpoint, bitstream;
  bool with_truth = false;

  auto* train = app.add_subcommand("train", "train on a video and save a checkpoint");
  add_common(train, train_opts);

  auto* encode = app.add_subcommand("encode", "prune, quantize and write the bitstream");
  add_common(encode, encode_opts);
  encode->add_option("--checkpoint", checkpoint, "start from a trained checkpoint")
      ->check(CLI::ExistingFile);

  auto* decode = app.add_subcommand("decode", "decode a bitstream to PNG frames");
  decode->add_option("bitstream", bitstream, "bitstream file")->required()->check(CLI::ExistingFile);
  add_common(decode, decode_opts);
  decode->add_flag("--score", with_truth, "score against the configured video");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on the configured video");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);

  auto* inpaint = app.add_subcommand("inpaint", "masked training and Input/Model comparison");
  add_common(inpaint, inpaint_opts);

  auto* interp = app.add_subcommand("interp", "train on even frames, decode odd frames");
  add_common(interp, interp_opts);

  auto* rd = app.add_subcommand("rd-curve", "train and compress at each rd_budgets entry");
  add_common(rd, rd_opts);

  auto* synth = app.add_subcommand("synth", "write the synthetic video as PNG frames");
  add_common(synth, synth_opts);

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::debug : quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    if (*train) {
      print_summary(run_train(resolve(train_opts)));
    } else if (*encode) {
      print_summary(run_encode(resolve(encode_opts), checkpoint));
    } else if (*decode) {
      const RunConfig c = resolve(decode_opts);
      print_summary(run_decode(bitstream, c.out_dir, with_truth ? &c : nullptr));
    } else if (*eval) {
      print_summary(run_eval(resolve(eval_opts), checkpoint));
    } else if (*inpaint) {
      const InpaintSummary s = run_inpaint(resolve(inpaint_opts));
      std::printf("input_psnr_db %.4f\nmodel_psnr_db %.4f\n", s.input_psnr, s.model_psnr);
    } else if (*interp) {
      const InterpSummary s = run_interp(resolve(interp_opts));
      std::printf("train_psnr_db %.4f\ntest_psnr_db %.4f\n", s.train_psnr, s.test_psnr);
    } else if (*rd) {
      for (const RdPoint& p : run_rd_curve(resolve(rd_opts)))
        std::printf("%.0f %zu %.6f %.4f\n", p.budget, static_cast<std::size_t>(p.total_bytes),
                    p.bpp, p.psnr);
    } else if (*synth) {
      const RunConfig c = resolve(synth_opts);
      const fs::path dir(c.out_dir);
      fs::create_directories(dir);
      const auto video =
          synthetic_video(c.synthetic_frames, c.model.height, c.model.width, c.synthetic_seed);
      for (std::size_t i = 0; i < video.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%04zu.png", i);
        write_png(dir / name, video[i]);
      }
      std::printf("wrote %zu frames to %s\n", video.size(), dir.c_str());
    }
  } catch (const ConfigError& e) {
    spdlog::error("config: {}", e.what());
    return kConfig;
  } catch (const ParameterError& e) {
    spdlog::error("parameter: {}", e.what());
    return kConfig;
  } catch (const DataError& e) {
    spdlog::error("data: {}", e.what());
    return kData;
  } catch (const IntegrityError& e) {
    spdlog::error("bitstream: {}", e.what());
    return kData;
  } catch (const NumericError& e) {
    spdlog::error("numeric: {}", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kInternal;
  }
  return kOk;
}
