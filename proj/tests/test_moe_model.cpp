#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "testutil.hpp"
#include "voicemoe/metrics.hpp"
#include "voicemoe/moe_model.hpp"
#include "voicemoe/rng.hpp"

using namespace voicemoe;
using ad::Tape;
using ad::Tensor;
using moe::MoeModel;
using moe::MoeModelConfig;

namespace {

MoeModelConfig tiny_config(std::uint64_t seed = 5) {
  MoeModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_experts = 2;
  cfg.n_heads = 2;
  cfg.ff_dim = 12;
  cfg.seed = seed;
  return cfg;
}

Tensor random_batch(Rng& rng, std::int64_t n, std::int64_t f = 6) {
  Tensor x = Tensor::zeros({n, f});
  for (auto& v : x.mutable_data()) v = rng.normal(0.0, 1.0);
  return x;
}

bool same_values(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("config invariants") {
  MoeModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_heads = 5;
  CHECK_THROWS_AS(moe::validate(cfg), ConfigError);  // not divisible
  cfg.n_heads = 4;
  cfg.n_experts = 0;
  CHECK_THROWS_AS(moe::validate(cfg), ConfigError);
  cfg.n_experts = 4;
  cfg.n_classes = 3;
  CHECK_THROWS_AS(moe::validate(cfg), ConfigError);
}

TEST_CASE("init is deterministic under the seed") {
  const MoeModel a(tiny_config(7));
  const MoeModel b(tiny_config(7));
  const MoeModel c(tiny_config(8));
  REQUIRE(a.parameters().size() == b.parameters().size());
  bool all_equal = true, any_diff_c = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    all_equal = all_equal && same_values(a.parameters()[i], b.parameters()[i]);
    any_diff_c = any_diff_c || !same_values(a.parameters()[i], c.parameters()[i]);
  }
  CHECK(all_equal);
  CHECK(any_diff_c);
  CHECK(a.parameter_count() == b.parameter_count());
}

TEST_CASE("forward has no cross-sample interaction") {
  Rng rng(1);
  const MoeModel model(tiny_config());
  const Tensor one = random_batch(rng, 1);
  std::vector<double> dup(one.data().begin(), one.data().end());
  dup.insert(dup.end(), one.data().begin(), one.data().end());
  const Tensor two = Tensor::from_data({2, 6}, dup);

  Tape t(false);
  const Tensor l1 = model.forward(t, one);
  const Tensor l2 = model.forward(t, two);
  CHECK(l2.data()[0] == l1.data()[0]);
  CHECK(l2.data()[1] == l1.data()[1]);
  CHECK(l2.data()[2] == l1.data()[0]);
  CHECK(l2.data()[3] == l1.data()[1]);

  CHECK_THROWS_AS(model.forward(t, Tensor::zeros({2, 5})), ShapeError);
}

TEST_CASE("single expert: gating and uniform fusion coincide") {
  MoeModelConfig cfg = tiny_config(3);
  cfg.n_experts = 1;
  const MoeModel gated(cfg);
  cfg.use_gating = false;
  MoeModel uniform(cfg);
  uniform.load_state(gated.state());  // same parameter values

  Rng rng(2);
  const Tensor x = random_batch(rng, 5);
  Tape t(false);
  CHECK(same_values(gated.forward(t, x), uniform.forward(t, x)));
}

TEST_CASE("disabled gating averages the expert paths uniformly") {
  // With use_gating = false and a linear head, the logits must equal the
  // mean of the logits of single-expert models that share the embedding,
  // the head, and one expert each.
  MoeModelConfig cfg = tiny_config(19);
  cfg.n_experts = 2;
  cfg.use_gating = false;
  const MoeModel uniform(cfg);

  MoeModelConfig one = cfg;
  one.n_experts = 1;
  one.use_gating = true;
  MoeModel only0(one), only1(one);
  {
    const auto& names = uniform.parameter_names();
    const auto state = uniform.state();
    auto s0 = only0.state(), s1 = only1.state();
    const auto& n0 = only0.parameter_names();
    for (std::size_t i = 0; i < n0.size(); ++i) {
      // single-expert models lack expert1.* and have a 1-column gate; map
      // everything else by name, taking expert1.* of the source for only1
      std::string want0 = n0[i], want1 = n0[i];
      if (want1.rfind("expert0.", 0) == 0) want1 = "expert1" + want1.substr(7);
      for (std::size_t j = 0; j < names.size(); ++j) {
        if (names[j] == want0 && names[j].rfind("gate.", 0) != 0) s0[i] = state[j];
        if (names[j] == want1 && names[j].rfind("gate.", 0) != 0) s1[i] = state[j];
      }
    }
    only0.load_state(s0);
    only1.load_state(s1);
  }

  Rng rng(12);
  const Tensor x = random_batch(rng, 5);
  Tape t(false);
  const Tensor lu = uniform.forward(t, x);
  const Tensor l0 = only0.forward(t, x);
  const Tensor l1 = only1.forward(t, x);
  for (std::size_t i = 0; i < lu.data().size(); ++i) {
    CHECK(lu.data()[i] ==
          doctest::Approx(0.5 * (l0.data()[i] + l1.data()[i])).epsilon(1e-12));
  }
}

TEST_CASE("predict_proba lies on the simplex and preserves argmax") {
  Rng rng(3);
  const MoeModel model(tiny_config(9));
  const Tensor x = random_batch(rng, 7);
  Tape t(false);
  const Tensor logits = model.forward(t, x);
  const Tensor probs = model.predict_proba(t, x);
  for (std::int64_t i = 0; i < 7; ++i) {
    const double p0 = probs.data()[static_cast<std::size_t>(i * 2)];
    const double p1 = probs.data()[static_cast<std::size_t>(i * 2 + 1)];
    CHECK(p0 >= 0.0);
    CHECK(p1 >= 0.0);
    CHECK(std::abs(p0 + p1 - 1.0) <= 1e-12);
    const bool logit_argmax = logits.data()[static_cast<std::size_t>(i * 2 + 1)] >
                              logits.data()[static_cast<std::size_t>(i * 2)];
    CHECK((p1 > p0) == logit_argmax);
  }
}

TEST_CASE("zero classifier head gives uniform probabilities") {
  MoeModel model(tiny_config(4));
  auto& params = model.parameters();
  const auto& names = model.parameter_names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (names[i] == "head.w" || names[i] == "head.b") {
      for (auto& v : params[i].mutable_data()) v = 0.0;
    }
  }
  Rng rng(4);
  Tape t(false);
  const Tensor probs = model.predict_proba(t, random_batch(rng, 4));
  for (const double v : probs.data()) CHECK(v == 0.5);
}

TEST_CASE("gate weights form a probability simplex for random inputs") {
  // observable via the n_experts=1 case and via fusion linearity; here we
  // check the gate indirectly: scaling any expert path by the gate keeps
  // logits finite and deterministic across calls.
  Rng rng(5);
  const MoeModel model(tiny_config(6));
  const Tensor x = random_batch(rng, 9);
  Tape t(false);
  const Tensor a = model.forward(t, x);
  const Tensor b = model.forward(t, x);
  CHECK(same_values(a, b));
  for (const double v : a.data()) CHECK(std::isfinite(v));
}

TEST_CASE("permuting experts together with gating columns leaves logits unchanged") {
  MoeModelConfig cfg = tiny_config(11);
  cfg.n_experts = 3;
  const MoeModel model(cfg);
  MoeModel permuted(cfg);

  // permutation [2, 0, 1]: expert e of `permuted` takes parameters of
  // expert perm[e] of `model`, gating/bias columns likewise.
  const std::array<std::size_t, 3> perm{2, 0, 1};
  const auto& names = model.parameter_names();
  auto state = model.state();
  auto new_state = state;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].rfind("expert", 0) == 0) {
      const std::size_t e = static_cast<std::size_t>(names[i][6] - '0');
      const std::string rest = names[i].substr(7);
      // find source index: expert perm[e] with same suffix
      const std::string src = "expert" + std::to_string(perm[e]) + rest;
      for (std::size_t j = 0; j < names.size(); ++j) {
        if (names[j] == src) new_state[i] = state[j];
      }
    }
  }
  // gate.w is [d, n_experts], row-major: permute columns
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == "gate.w") {
      const auto d = static_cast<std::size_t>(cfg.d_model);
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t e = 0; e < 3; ++e) new_state[i][r * 3 + e] = state[i][r * 3 + perm[e]];
    }
    if (names[i] == "gate.b") {
      for (std::size_t e = 0; e < 3; ++e) new_state[i][e] = state[i][perm[e]];
    }
  }
  permuted.load_state(new_state);

  Rng rng(6);
  const Tensor x = random_batch(rng, 4);
  Tape t(false);
  const Tensor la = model.forward(t, x);
  const Tensor lb = permuted.forward(t, x);
  for (std::size_t i = 0; i < la.data().size(); ++i) {
    CHECK(la.data()[i] == doctest::Approx(lb.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("mean cross-entropy gradient matches finite differences for every parameter") {
  MoeModelConfig cfg;
  cfg.d_model = 4;
  cfg.n_experts = 2;
  cfg.n_heads = 2;
  cfg.ff_dim = 6;
  cfg.seed = 13;
  MoeModel model(cfg);
  Rng rng(7);
  const Tensor x = random_batch(rng, 3);
  const std::vector<std::int64_t> y{1, 0, 1};

  const auto loss_of = [&](Tape& t) {
    const Tensor logp = t.log_softmax(model.forward(t, x));
    return t.mul_scalar(t.mean(t.gather_log_prob(logp, y, {3})), -1.0);
  };
  const double err = testutil::max_grad_fd_error(
      model.parameters(),
      [&] {
        Tape t;
        Tensor loss = loss_of(t);
        t.backward(loss);
      },
      [&] {
        Tape t(false);
        return loss_of(t).item();
      });
  CHECK(err < 1e-4);
}

TEST_CASE("checkpoint round trip is bit-identical") {
  testutil::TempDir tmp("ckpt");
  MoeModelConfig cfg = tiny_config(21);
  const MoeModel model(cfg);

  data::StandardizationParams sp;
  for (int j = 0; j < 6; ++j) {
    sp.mean[static_cast<std::size_t>(j)] = j * 1.5;
    sp.stddev[static_cast<std::size_t>(j)] = 1.0 + j;
  }
  moe::save_checkpoint(model, tmp.path() / "ck", sp);
  const auto loaded = moe::load_checkpoint(tmp.path() / "ck");

  CHECK(loaded.model.config() == cfg);
  REQUIRE(loaded.standardization.has_value());
  CHECK(loaded.standardization->mean == sp.mean);
  CHECK(loaded.standardization->stddev == sp.stddev);

  Rng rng(8);
  const Tensor x = random_batch(rng, 3);
  Tape t(false);
  CHECK(same_values(model.forward(t, x), loaded.model.forward(t, x)));

  // saving the loaded model again reproduces the same bytes
  moe::save_checkpoint(loaded.model, tmp.path() / "ck2", sp);
  CHECK(testutil::read_file(tmp.path() / "ck" / "weights.bin") ==
        testutil::read_file(tmp.path() / "ck2" / "weights.bin"));
}

TEST_CASE("checkpoint corruption and version errors") {
  testutil::TempDir tmp("ckptbad");
  const MoeModel model(tiny_config(22));
  moe::save_checkpoint(model, tmp.path() / "ck");

  SUBCASE("truncated weights") {
    auto bytes = testutil::read_file(tmp.path() / "ck" / "weights.bin");
    bytes.resize(bytes.size() - 8);
    std::ofstream(tmp.path() / "ck" / "weights.bin", std::ios::binary) << bytes;
    CHECK_THROWS_AS(moe::load_checkpoint(tmp.path() / "ck"), CheckpointError);
  }

  SUBCASE("flipped payload byte fails the checksum") {
    auto bytes = testutil::read_file(tmp.path() / "ck" / "weights.bin");
    bytes[10] = static_cast<char>(bytes[10] ^ 0x40);
    std::ofstream(tmp.path() / "ck" / "weights.bin", std::ios::binary) << bytes;
    CHECK_THROWS_AS(moe::load_checkpoint(tmp.path() / "ck"), CheckpointError);
  }

  SUBCASE("manifest n_experts inconsistent with weights length") {
    auto manifest = testutil::read_file(tmp.path() / "ck" / "manifest.json");
    const auto pos = manifest.find("\"n_experts\": 2");
    REQUIRE(pos != std::string::npos);
    manifest.replace(pos, 14, "\"n_experts\": 4");
    std::ofstream(tmp.path() / "ck" / "manifest.json", std::ios::binary) << manifest;
    CHECK_THROWS_AS(moe::load_checkpoint(tmp.path() / "ck"), CheckpointError);
  }

  SUBCASE("unknown format version") {
    auto manifest = testutil::read_file(tmp.path() / "ck" / "manifest.json");
    const auto pos = manifest.find("\"format_version\": 1");
    REQUIRE(pos != std::string::npos);
    manifest.replace(pos, 19, "\"format_version\": 9");
    std::ofstream(tmp.path() / "ck" / "manifest.json", std::ios::binary) << manifest;
    CHECK_THROWS_AS(moe::load_checkpoint(tmp.path() / "ck"), VersionError);
  }

  SUBCASE("missing checkpoint directory") {
    CHECK_THROWS_AS(moe::load_checkpoint(tmp.path() / "nope"), ConfigError);
  }
}
