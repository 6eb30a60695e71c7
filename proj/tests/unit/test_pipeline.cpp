#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "vqnerv/data.hpp"
#include "vqnerv/errors.hpp"
#include "vqnerv/pipeline.hpp"

using namespace vqnerv;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

Tensor gradient_frame(int h, int w, float phase) {
  Tensor t({3, h, w});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        t.at(c, y, x) = std::clamp((x + y + 7 * c) / static_cast<float>(h + w + 14) + phase, 0.0f, 1.0f);
  return t;
}

// Small, fast run configuration on the 16x32 synthetic video.
RunConfig small_run(const fs::path& out) {
  RunConfig c;
  c.model.height = 16;
  c.model.width = 32;
  c.model.strides = {2, 2, 2, 2};
  c.model.encoder_width = 8;
  c.model.decoder_channels = 12;
  c.model.codebook.size = 16;
  c.model.codebook.dim = 4;
  c.synthetic_frames = 4;
  c.epochs = 3;
  c.out_dir = out.string();
  return c;
}

}  // namespace

TEST_SUITE("pipeline-cli") {
  TEST_CASE("load_frames reads numbered PNGs in numeric order") {
    TempDir dir("vqnerv_unit_frames");
    for (int i : {10, 2, 1, 0, 3, 4, 5, 6, 7, 8, 9}) {
      if (i > 7) continue;
      write_png(dir.path / ("frame_" + std::to_string(i) + ".png"), gradient_frame(64, 128, 0.02f * i));
    }
    VideoDataset ds = load_frames(dir.path);
    CHECK(ds.size() == 8);
    CHECK(ds.height == 64);
    CHECK(ds.width == 128);
    CHECK(ds.files[2].filename() == "frame_2.png");
    CHECK(std::abs(ds.frames[5][0] - gradient_frame(64, 128, 0.1f)[0]) <= 0.5f / 255.0f);
    for (const Tensor& f : ds.frames)
      for (float v : f.data()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
      }
  }

  TEST_CASE("load_frames names a missing index") {
    TempDir dir("vqnerv_unit_gap");
    for (int i : {0, 1, 3}) write_png(dir.path / ("f" + std::to_string(i) + ".png"), gradient_frame(8, 8, 0));
    try {
      load_frames(dir.path);
      FAIL("expected a DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("2") != std::string::npos);
    }
  }

  TEST_CASE("load_frames names a frame with other dimensions") {
    TempDir dir("vqnerv_unit_dims");
    write_png(dir.path / "f0.png", gradient_frame(8, 8, 0));
    write_png(dir.path / "f1.png", gradient_frame(8, 10, 0));
    try {
      load_frames(dir.path);
      FAIL("expected a DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("f1.png") != std::string::npos);
    }
    CHECK_THROWS_AS(load_frames(dir.path / "missing"), DataError);
  }

  TEST_CASE("center crop window") {
    Tensor big({1, 120, 140});
    for (int y = 0; y < 120; ++y)
      for (int x = 0; x < 140; ++x) big.at(0, y, x) = static_cast<float>(y * 1000 + x);
    Tensor c = center_crop(big, 100, 100);
    REQUIRE(c.shape() == Shape{1, 100, 100});
    CHECK(c.at(0, 0, 0) == 10 * 1000 + 20);
    CHECK(c.at(0, 99, 99) == 109 * 1000 + 119);
    CHECK_THROWS_AS(center_crop(big, 121, 10), ParameterError);
  }

  TEST_CASE("load_frames applies the crop") {
    TempDir dir("vqnerv_unit_crop");
    for (int i = 0; i < 2; ++i) write_png(dir.path / ("f" + std::to_string(i) + ".png"), gradient_frame(120, 140, 0));
    VideoDataset ds = load_frames(dir.path, {100, 100});
    CHECK(ds.height == 100);
    CHECK(ds.width == 100);
  }

  TEST_CASE("box masks") {
    Tensor none = make_box_mask(64, 128, 0, 10, 1);
    CHECK(none.sum() == 0.0);
    Tensor m = make_box_mask(256, 256, 5, 50, 3);
    CHECK(m.sum() <= 5 * 50 * 50);
    CHECK(m.sum() >= 50 * 50);
    CHECK(make_box_mask(256, 256, 5, 50, 3).storage() == m.storage());
    CHECK(make_box_mask(256, 256, 5, 50, 4).storage() != m.storage());
    CHECK_THROWS_AS(make_box_mask(40, 60, 1, 41, 1), ParameterError);
    CHECK(scaled_box_width(1920) == 50);
    CHECK(scaled_box_width(128) == 3);
    CHECK(scaled_box_width(10) == 1);
  }

  TEST_CASE("disperse mask drops the requested fraction") {
    Tensor m = make_disperse_mask(64, 128, 0.1f, 5);
    CHECK(m.sum() / m.size() == doctest::Approx(0.1).epsilon(0.1));
    CHECK(make_disperse_mask(64, 128, 0.1f, 5).storage() == m.storage());
    Tensor frame = gradient_frame(64, 128, 0.2f);
    Tensor masked = apply_mask(frame, m);
    for (int i = 0; i < 64 * 128; ++i)
      if (m[i] > 0.5f) CHECK(masked[i] == 0.0f);
  }

  TEST_CASE("splits partition the indices") {
    for (int n : {1, 2, 7, 8}) {
      Split s = even_odd_split(n);
      std::set<int> all(s.train.begin(), s.train.end());
      for (int t : s.test) CHECK(all.insert(t).second);
      CHECK(static_cast<int>(all.size()) == n);
      CHECK(static_cast<int>(s.test.size()) == n / 2);
      for (int t : s.train) CHECK(t % 2 == 0);
      CHECK(static_cast<int>(all_split(n).train.size()) == n);
    }
  }

  TEST_CASE("synthetic video is deterministic") {
    auto a = synthetic_video(3, 16, 32, 9), b = synthetic_video(3, 16, 32, 9);
    for (int i = 0; i < 3; ++i) CHECK(a[i].storage() == b[i].storage());
    CHECK(a[0].storage() != a[1].storage());
    auto s = static_video(3, 16, 32, 9);
    CHECK(s[0].storage() == s[2].storage());
  }

  TEST_CASE("config parsing") {
    RunConfig c = parse_run_config("# comment\nepochs = 12\nstrides = 4,2,2,2\ntask = inpaint\nlr=0.002\n");
    CHECK(c.epochs == 12);
    CHECK(c.task == Task::kInpaint);
    CHECK(c.adam.lr == doctest::Approx(0.002));
    CHECK(c.model.strides == std::vector<int>{4, 2, 2, 2});
    CHECK_THROWS_AS(parse_run_config("bogus = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("epochs = many\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("epochs\n"), ConfigError);
    CHECK_THROWS_AS(load_run_config({}, {{"epochs", "0"}}), ConfigError);
    CHECK_THROWS_AS(load_run_config({}, {{"width", "100"}}), ConfigError);
    auto [k, v] = parse_override("seed=5");
    CHECK(k == "seed");
    CHECK(v == "5");
    CHECK_THROWS_AS(parse_override("seed"), ConfigError);
  }

  TEST_CASE("config echo round trips") {
    RunConfig c;
    c.epochs = 77;
    c.model.decoder_budget = 0.15e6;
    c.rd_budgets = {0.05e6, 0.1e6, 0.2e6};
    c.mask_kind = MaskKind::kDisperse;
    const std::string text = echo(c);
    CHECK(echo(parse_run_config(text)) == text);
    CHECK(text.find("epochs = 77") != std::string::npos);
  }

  TEST_CASE("one epoch on one frame emits one CSV row") {
    TempDir dir("vqnerv_unit_train1");
    RunConfig c = small_run(dir.path);
    c.synthetic_frames = 1;
    c.epochs = 1;
    run_train(c);
    CHECK(count_lines(dir.path / "metrics.csv") == 2);
    CHECK(fs::exists(dir.path / "config.txt"));
    CHECK(fs::exists(dir.path / "checkpoint.vqnc"));
    CHECK(slurp(dir.path / "config.txt") == echo(c));
  }

  TEST_CASE("identical seeds reproduce the run byte for byte") {
    TempDir a("vqnerv_unit_seed_a"), b("vqnerv_unit_seed_b");
    RunConfig ca = small_run(a.path), cb = small_run(b.path);
    RunSummary ra = run_encode(ca, {}), rb = run_encode(cb, {});
    CHECK(*ra.psnr == *rb.psnr);
    for (const char* f : {"metrics.csv", "frames.csv", "report.csv"})
      CHECK(slurp(a.path / f) == slurp(b.path / f));
    CHECK(slurp(a.path / "bitstream.vqnv") == slurp(b.path / "bitstream.vqnv"));
    for (const char* f : {"config.txt", "metrics.csv", "checkpoint.vqnc", "bitstream.vqnv"})
      CHECK(fs::exists(a.path / f));
  }

  TEST_CASE("decode reproduces the encode run") {
    TempDir dir("vqnerv_unit_decode");
    RunConfig c = small_run(dir.path / "enc");
    RunSummary enc = run_encode(c, {});
    RunSummary dec = run_decode(dir.path / "enc" / "bitstream.vqnv", dir.path / "dec", &c);
    REQUIRE(dec.psnr);
    CHECK(*dec.psnr == doctest::Approx(*enc.psnr).epsilon(1e-9));
    CHECK(fs::exists(dir.path / "dec" / "frames" / "frame_0003.png"));
    CHECK(dec.report->total_bytes == enc.report->total_bytes);
  }

  TEST_CASE("eval of a saved checkpoint") {
    TempDir dir("vqnerv_unit_eval");
    RunConfig c = small_run(dir.path / "train");
    RunSummary trained = run_train(c);
    RunConfig e = c;
    e.out_dir = (dir.path / "eval").string();
    RunSummary ev = run_eval(e, dir.path / "train" / "checkpoint.vqnc");
    CHECK(*ev.psnr == doctest::Approx(*trained.psnr).epsilon(1e-9));
    CHECK_THROWS_AS(run_eval(e, dir.path / "none.vqnc"), DataError);
  }

  TEST_CASE("training drives the loss down and keeps the best state") {
    RunConfig c;
    c.model.decoder_budget = 0.1e6;
    const auto video = synthetic_video(8, 64, 128, 42);
    TrainData data = make_train_data(c, video, all_split(8).train);
    Model m(c.model, 1);
    TrainResult r = train_model(m, data, train_settings(c, 30));
    REQUIRE(r.history.size() == 30);
    CHECK(r.history.back().loss < r.history.front().loss);
    CHECK(r.best_psnr == doctest::Approx(evaluate(m, data).psnr).epsilon(1e-9));
    for (const EpochRecord& e : r.history) CHECK(e.psnr <= r.best_psnr + 1e-9);
  }

  TEST_CASE("non-finite loss halts and restores") {
    RunConfig c = small_run("unused");
    const auto video = synthetic_video(2, 16, 32, 1);
    TrainData data = make_train_data(c, video, all_split(2).train);
    data.targets[1][0] = std::nanf("");
    Model m(c.model, 1);
    const Tensor before = m.params().get("head.weight").value();
    CHECK_THROWS_AS(train_model(m, data, train_settings(c, 2)), NumericError);
    for (const auto& [name, v] : m.params()) CHECK(v.value().all_finite());
  }

  TEST_CASE("inpainting with an empty mask is regression") {
    RunConfig c = small_run("unused");
    c.task = Task::kInpaint;
    c.mask_boxes = 0;
    const auto video = synthetic_video(2, 16, 32, 1);
    TrainData masked = make_train_data(c, video, all_split(2).train);
    c.task = Task::kRegress;
    TrainData plain = make_train_data(c, video, all_split(2).train);
    Model a(c.model, 3), b(c.model, 3);
    train_model(a, masked, train_settings(c, 2));
    train_model(b, plain, train_settings(c, 2));
    CHECK(evaluate(a, masked).psnr == doctest::Approx(evaluate(b, plain).psnr).epsilon(1e-6));
  }

  TEST_CASE("inpaint run writes Input and Model rows") {
    TempDir dir("vqnerv_unit_inpaint");
    RunConfig c = small_run(dir.path);
    c.mask_width = 4;
    c.mask_boxes = 2;
    InpaintSummary s = run_inpaint(c);
    CHECK(count_lines(dir.path / "inpaint.csv") == 3);
    const std::string csv = slurp(dir.path / "inpaint.csv");
    CHECK(csv.find("\nInput,") != std::string::npos);
    CHECK(csv.find("\nModel,") != std::string::npos);
    CHECK(s.input_psnr < kPsnrCap);
    InpaintSummary again = run_inpaint(c);
    CHECK(again.model_psnr == s.model_psnr);
  }

  TEST_CASE("interpolation rows and the static-video oracle") {
    TempDir dir("vqnerv_unit_interp");
    RunConfig c = small_run(dir.path);
    c.synthetic_frames = 7;
    InterpSummary s = run_interp(c);
    CHECK(s.rows.size() == 3);
    CHECK(count_lines(dir.path / "interp.csv") == 4);
    for (const FrameMetrics& r : s.rows) CHECK(r.frame_index % 2 == 1);

    const auto still = static_video(6, 16, 32, 4);
    RunConfig sc = small_run(dir.path);
    sc.task = Task::kInterpolate;
    TrainData even = make_train_data(sc, still, even_odd_split(6).train);
    Model m(sc.model, 2);
    train_model(m, even, train_settings(sc, 20));
    InterpSummary st = interpolate_odd(m, still);
    CHECK(std::abs(st.test_psnr - st.train_psnr) < 0.5);
    CHECK_THROWS_AS(interpolate_odd(m, std::vector<Tensor>(still.begin(), still.begin() + 2)), DataError);
  }

  TEST_CASE("rd curve emits one row per budget") {
    TempDir dir("vqnerv_unit_rd");
    RunConfig c = small_run(dir.path);
    c.epochs = 2;
    c.rd_budgets = {20000, 60000};
    auto points = run_rd_curve(c);
    CHECK(points.size() == 2);
    std::ifstream in(dir.path / "rd.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "budget,total_bytes,bpp,psnr,ssim");
    CHECK(count_lines(dir.path / "rd.csv") == 3);
    CHECK(points[1].total_bytes > points[0].total_bytes);
    c.rd_budgets = {20000};
    CHECK_THROWS_AS(run_rd_curve(c), ConfigError);
  }
}
