#include <catch_amalgamated.hpp>

#include <fstream>

#include "support.hpp"

using namespace ddl;
using testing::TempDir;

namespace {

template <typename S>
Tensor<S> random_clips(const ModelConfig& m, std::size_t B, std::size_t H, std::size_t W, std::uint64_t seed) {
  Rng rng(seed);
  return testing::uniform_tensor<S>({B, m.in_channels, m.frames, H, W}, rng);
}

}  // namespace

TEST_CASE("forward returns one middle frame per clip", "[model]") {
  const auto m = testing::tiny_model();
  TemporalSkipUNet<float> net(m);
  const auto y = net.infer(random_clips<float>(m, 2, 16, 16, 1));
  CHECK(y.shape() == Shape{2, 1, 1, 16, 16});

  ModelConfig big;
  big.base_channels = 8;
  TemporalSkipUNet<float> deep(big);
  CHECK(deep.infer(random_clips<float>(big, 1, 64, 64, 2)).shape() == Shape{1, 1, 1, 64, 64});

  TemporalSkipUNet<float> base(testing::tiny_model(ModelVariant::kUNetBaseline));
  CHECK(base.infer(random_clips<float>(base.config(), 1, 16, 16, 3)).shape() == Shape{1, 1, 1, 16, 16});
}

TEST_CASE("forward shape contract over random configurations", "[model][property]") {
  Rng rng(99);
  for (int trial = 0; trial < 12; ++trial) {
    ModelConfig m;
    m.variant = rng.below(2) ? ModelVariant::kC3DSU : ModelVariant::kUNetBaseline;
    m.in_channels = rng.below(2) ? 1 : 3;
    m.frames = m.variant == ModelVariant::kC3DSU ? 1 + 2 * rng.below(3) : 1;
    m.base_channels = 4 * (1 + rng.below(2));
    m.depth = 1 + rng.below(3);
    m.seed = trial;
    const std::size_t div = m.spatial_divisor();
    const std::size_t H = div * (1 + rng.below(3)), W = div * (1 + rng.below(3));
    const std::size_t B = 1 + rng.below(2);
    TemporalSkipUNet<float> net(m);
    INFO("trial " << trial);
    CHECK(net.infer(random_clips<float>(m, B, H, W, trial)).shape() == Shape{B, m.in_channels, 1, H, W});
  }
}

TEST_CASE("forward rejects bad inputs", "[model]") {
  const auto m = testing::tiny_model();
  TemporalSkipUNet<float> net(m);
  CHECK_THROWS_AS(net.infer(Tensor<float>({1, 1, 2, 16, 16})), ContractError);
  CHECK_THROWS_AS(net.infer(Tensor<float>({1, 1, 3, 18, 16})), ContractError);
  auto x = random_clips<float>(m, 1, 16, 16, 4);
  x[5] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(net.infer(x), ContractError);
  ModelConfig bad = m;
  bad.frames = 2;
  CHECK_THROWS_AS(TemporalSkipUNet<float>(bad), ContractError);
}

TEST_CASE("evaluation forward is deterministic", "[model]") {
  TemporalSkipUNet<float> net(testing::tiny_model());
  const auto x = random_clips<float>(net.config(), 2, 16, 16, 5);
  CHECK(net.infer(x) == net.infer(x));
}

TEST_CASE("initialization is seeded, finite and standard for normalization", "[model]") {
  auto m = testing::tiny_model();
  TemporalSkipUNet<float> a(m), b(m);
  m.seed += 1;
  TemporalSkipUNet<float> c(m);
  bool all_equal = true, any_diff = false, finite = true;
  std::vector<const nn::Param<float>*> pa, pb, pc;
  a.visit([&](const nn::Param<float>& p) { pa.push_back(&p); });
  b.visit([&](const nn::Param<float>& p) { pb.push_back(&p); });
  c.visit([&](const nn::Param<float>& p) { pc.push_back(&p); });
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    all_equal = all_equal && pa[i]->value == pb[i]->value;
    any_diff = any_diff || !(pa[i]->value == pc[i]->value);
    finite = finite && pa[i]->value.all_finite();
    if (pa[i]->name.ends_with(".gamma"))
      for (auto v : pa[i]->value.values()) CHECK(v == 1.0f);
    if (pa[i]->name.ends_with(".beta"))
      for (auto v : pa[i]->value.values()) CHECK(v == 0.0f);
  }
  CHECK(all_equal);
  CHECK(any_diff);
  CHECK(finite);
}

TEST_CASE("encoder block halves the grid and concatenates four heads", "[model]") {
  nn::EncoderBlock<float> enc("e", 8, 16);
  Rng rng(1);
  enc.init(rng);
  auto x = testing::uniform_tensor<float>({8, 3, 16, 16}, rng);
  nn::EncoderCache<float> cache;
  const auto y = enc.forward(x, nn::Mode::kTrain, &cache);
  CHECK(y.shape() == Shape{16, 3, 8, 8});
  CHECK(cache.r1.dim(0) == 16);
  CHECK_THROWS_AS(enc.forward(Tensor<float>({8, 1, 15, 16}), nn::Mode::kEval, nullptr), ContractError);
}

TEST_CASE("decoder block upsamples and fuses the skip", "[model]") {
  nn::DecoderBlock<float> dec("d", 16, 8, 8);
  Rng rng(2);
  dec.init(rng);
  const auto y = dec.forward(testing::uniform_tensor<float>({16, 2, 4, 4}, rng),
                             testing::uniform_tensor<float>({8, 2, 8, 8}, rng), nn::Mode::kEval, nullptr);
  CHECK(y.shape() == Shape{8, 2, 8, 8});
  CHECK_THROWS_AS(dec.forward(Tensor<float>({16, 2, 4, 4}), Tensor<float>({8, 2, 6, 6}), nn::Mode::kEval, nullptr),
                  ContractError);
}

TEST_CASE("temporal fusion collapses the frame axis", "[model]") {
  nn::TemporalFusion<float> f("s", 4, 3);
  Rng rng(4);
  f.init(rng);
  CHECK(f.forward(testing::uniform_tensor<float>({4, 6, 8, 8}, rng)).shape() == Shape{4, 2, 8, 8});
  CHECK_THROWS_AS(f.forward(Tensor<float>({4, 4, 8, 8})), ContractError);
}

TEST_CASE("space-to-depth and depth-to-space are inverse rearrangements", "[model]") {
  Rng rng(8);
  const auto x = testing::uniform_tensor<float>({3, 2, 6, 4}, rng);
  const auto s = nn::space_to_depth(x);
  CHECK(s.shape() == Shape{12, 2, 3, 2});
  CHECK(nn::depth_to_space(s) == x);
  CHECK(s(1 * 4 + 1 * 2 + 0, 1, 2, 1) == x(1, 1, 5, 2));
  CHECK_THROWS_AS(nn::space_to_depth(Tensor<float>({1, 1, 3, 4})), ContractError);
}

TEST_CASE("with T = 1 the temporal model is a per-frame network", "[model]") {
  auto m = testing::tiny_model(ModelVariant::kC3DSU, 1);
  TemporalSkipUNet<float> net(m);
  const auto x = random_clips<float>(m, 3, 16, 16, 6);
  const auto y = net.infer(x);
  for (std::size_t b = 0; b < 3; ++b) {
    Tensor<float> one({1, 1, 1, 16, 16});
    std::copy_n(x.data() + b * 256, 256, one.data());
    const auto y1 = net.infer(one);
    for (std::size_t i = 0; i < 256; ++i) CHECK(y1[i] == Catch::Approx(y[b * 256 + i]).margin(1e-5));
  }
}

TEST_CASE("checkpoint round trip is bit exact", "[model][checkpoint]") {
  TempDir dir("ckpt");
  TemporalSkipUNet<float> net(testing::tiny_model());
  // Move the running statistics away from their initial values.
  const auto x = random_clips<float>(net.config(), 4, 16, 16, 7);
  net.forward(x, nn::Mode::kTrain);
  save_checkpoint(dir / "a.ckpt", net, 0.25);
  const auto loaded = load_checkpoint<float>(dir / "a.ckpt");
  CHECK(loaded.model.config() == net.config());
  REQUIRE(loaded.ell.has_value());
  CHECK(*loaded.ell == 0.25);
  CHECK(loaded.model.infer(x) == net.infer(x));

  save_checkpoint(dir / "b.ckpt", net);
  CHECK_FALSE(load_checkpoint<float>(dir / "b.ckpt").ell.has_value());
}

TEST_CASE("checkpoint rejects wrong versions and corruption", "[model][checkpoint]") {
  TempDir dir("ckpt_bad");
  TemporalSkipUNet<float> net(testing::tiny_model());
  save_checkpoint(dir / "v.ckpt", net, {}, json{{"note", "x"}});

  SECTION("version tag") {
    ContainerReader r(dir / "v.ckpt");
    ContainerWriter w;
    add_model(w, net);
    json h = r.header();
    h.erase("tensors");
    h["version"] = kCheckpointVersion + 1;
    w.write(dir / "w.ckpt", h);
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "w.ckpt"), IngestError);
  }
  SECTION("flipped payload byte") {
    std::fstream f(dir / "v.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(-100, std::ios::end);
    char c;
    f.read(&c, 1);
    c ^= 0x10;
    f.seekp(-100, std::ios::end);
    f.write(&c, 1);
    f.close();
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "v.ckpt"), IngestError);
  }
  SECTION("truncated file") {
    std::filesystem::resize_file(dir / "v.ckpt", 40);
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "v.ckpt"), IngestError);
  }
  SECTION("not a checkpoint") {
    std::ofstream(dir / "junk.ckpt") << "hello";
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "junk.ckpt"), IngestError);
  }
}

TEST_CASE("parameter gradients match central differences", "[model][gradient]") {
  const auto m = testing::tiny_model();
  TemporalSkipUNet<double> net(m);
  Rng rng(21);
  StepInputs<double> in{random_clips<double>(m, 2, 16, 16, 22), testing::uniform_tensor<double>({2, 1, 3, 16, 16}, rng),
                        testing::box_mask<double>({2, 1, 3, 16, 16}, 3, 11, 4, 12)};
  const AnomalyWeight w(0.3);
  const LossConfig lc;
  net.zero_grad();
  loss_and_gradients(net, w, in, TrainMode::kDDL, lc);

  std::vector<nn::Param<double>*> params;
  net.visit([&](nn::Param<double>& p) { params.push_back(&p); });
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  for (int k = 0; k < 24; ++k) {
    const std::size_t pi = rng.below(params.size());
    picks.push_back({pi, rng.below(params[pi]->value.size())});
  }
  std::vector<double> analytic;
  for (auto [pi, i] : picks) analytic.push_back(params[pi]->grad[i]);

  // Larger steps cross ReLU kinks for a few of the sampled weights.
  const double h = 1e-5;
  for (std::size_t k = 0; k < picks.size(); ++k) {
    auto& p = *params[picks[k].first];
    const std::size_t i = picks[k].second;
    const double orig = p.value[i];
    p.value[i] = orig + h;
    const double lp = loss_and_gradients(net, w, in, TrainMode::kDDL, lc).loss.total;
    p.value[i] = orig - h;
    const double lm = loss_and_gradients(net, w, in, TrainMode::kDDL, lc).loss.total;
    p.value[i] = orig;
    const double numeric = (lp - lm) / (2 * h);
    INFO(p.name << "[" << i << "] analytic " << analytic[k] << " numeric " << numeric);
    CHECK(std::abs(analytic[k] - numeric) <= 1e-2 * std::max(std::abs(analytic[k]), std::abs(numeric)) + 1e-7);
  }
}

TEST_CASE("input gradient matches central differences", "[model][gradient]") {
  for (auto variant : {ModelVariant::kC3DSU, ModelVariant::kUNetBaseline}) {
    const auto m = testing::tiny_model(variant);
    TemporalSkipUNet<double> net(m);
    auto x = random_clips<double>(m, 2, 16, 16, 30);
    Rng rng(31);
    const auto target = testing::uniform_tensor<double>({2, 1, 1, 16, 16}, rng);
    auto loss = [&](const Tensor<double>& clips, Tensor<double>* dx) {
      ForwardTape<double> tape;
      const auto y = net.forward(clips, nn::Mode::kTrain, &tape);
      double l = 0.0;
      Tensor<double> dy(y.shape());
      for (std::size_t i = 0; i < y.size(); ++i) {
        l += 0.5 * (y[i] - target[i]) * (y[i] - target[i]);
        dy[i] = y[i] - target[i];
      }
      if (dx) *dx = net.backward(tape, dy);
      return l;
    };
    Tensor<double> dx;
    loss(x, &dx);
    const double h = 1e-4;
    for (int k = 0; k < 20; ++k) {
      const std::size_t i = rng.below(x.size());
      const double orig = x[i];
      x[i] = orig + h;
      const double lp = loss(x, nullptr);
      x[i] = orig - h;
      const double lm = loss(x, nullptr);
      x[i] = orig;
      const double numeric = (lp - lm) / (2 * h);
      INFO(to_string(variant) << " input[" << i << "] analytic " << dx[i] << " numeric " << numeric);
      CHECK(std::abs(dx[i] - numeric) <= 1e-2 * std::max(std::abs(dx[i]), std::abs(numeric)) + 1e-7);
    }
  }
}
