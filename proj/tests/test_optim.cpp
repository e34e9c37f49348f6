#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "dcopf/error.hpp"
#include "dcopf/optim.hpp"

using namespace dcopf;
using namespace dcopf::ad;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "dcopf_test_optim";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

}  // namespace

TEST_CASE("Adam with zero gradient leaves parameters alone") {
  ParameterStore store;
  auto& p = store.add("w", Matrix::Constant(2, 3, 1.5));
  Adam adam(store.all(), AdamConfig{});
  adam.zero_grad();
  adam.step();
  CHECK((p.value.array() == 1.5).all());
  CHECK(adam.step_count() == 1);
}

TEST_CASE("AdamW with zero gradient applies only the decay") {
  ParameterStore store;
  auto& p = store.add("w", Matrix::Constant(1, 4, 2.0));
  Adam adam(store.all(), adamw_config(3e-3, 1e-5));
  adam.zero_grad();
  adam.step();
  CHECK((p.value.array() - (2.0 - 3e-3 * 1e-5 * 2.0)).abs().maxCoeff() < 1e-18);
}

TEST_CASE("first Adam step has magnitude lr") {
  for (double g : {1.0, -3.0, 1e-3}) {
    ParameterStore store;
    auto& p = store.add("w", Matrix::Zero(3, 3));
    Adam adam(store.all(), AdamConfig{});
    p.grad = Matrix::Constant(3, 3, g);
    adam.step();
    // m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
    const double expect = -1e-3 * g / (std::abs(g) + 1e-8);
    CHECK((p.value.array() - expect).abs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("Adam matches a hand-rolled reference over several steps") {
  ParameterStore store;
  auto& p = store.add("w", Matrix::Constant(1, 1, 0.7));
  AdamConfig cfg;
  cfg.lr = 0.05;
  Adam adam(store.all(), cfg);
  double x = 0.7, m = 0.0, v = 0.0;
  for (int t = 1; t <= 25; ++t) {
    const double g = 2.0 * (x - 0.2);
    p.grad(0, 0) = 2.0 * (p.value(0, 0) - 0.2);
    adam.step();
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.999, t));
    x -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    CHECK(p.value(0, 0) == doctest::Approx(x).epsilon(1e-12));
  }
  CHECK(adam.step_count() == 25);
}

TEST_CASE("cosine annealing") {
  CHECK(cosine_anneal(3e-3, 0, 100) == 3e-3);
  CHECK(cosine_anneal(3e-3, 100, 100) == doctest::Approx(0.0).epsilon(1e-18));
  CHECK(cosine_anneal(3e-3, 100, 100, 1e-5) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(cosine_anneal(3e-3, 50, 100, 1e-4) == doctest::Approx((3e-3 + 1e-4) / 2).epsilon(1e-12));
  CHECK(cosine_anneal(1.0, 25, 100) ==
        doctest::Approx(0.5 * (1.0 + std::cos(std::numbers::pi / 4))).epsilon(1e-14));
}

TEST_CASE("gradient clipping") {
  ParameterStore store;
  auto& a = store.add("a", Matrix::Zero(1, 2));
  auto& b = store.add("b", Matrix::Zero(1, 1));
  const auto set = [&](double x, double y, double z) {
    a.grad = Matrix(1, 2);
    a.grad << x, y;
    b.grad = Matrix(1, 1);
    b.grad << z;
  };
  SUBCASE("below the limit") {
    set(0.0, 0.3, 0.0);
    CHECK(clip_grad_norm(store.all(), 0.5) == doctest::Approx(0.3));
    CHECK(a.grad(0, 1) == 0.3);
  }
  SUBCASE("above the limit") {
    set(1.2, 0.0, 1.6);  // norm 2
    CHECK(clip_grad_norm(store.all(), 0.5) == doctest::Approx(2.0));
    CHECK(a.grad(0, 0) == doctest::Approx(0.3));
    CHECK(b.grad(0, 0) == doctest::Approx(0.4));
    CHECK(grad_norm(store.all()) == doctest::Approx(0.5));
  }
  SUBCASE("zero gradients") {
    set(0.0, 0.0, 0.0);
    CHECK(clip_grad_norm(store.all(), 0.5) == 0.0);
    CHECK(grad_norm(store.all()) == 0.0);
  }
}

TEST_CASE("checkpoint round trip") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  ParameterStore src;
  Matrix w(3, 4), bias(1, 4);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng) * 1e-3;
  for (Index i = 0; i < bias.size(); ++i) bias.data()[i] = n(rng) * 1e5;
  src.add("layer.weight", w);
  src.add("layer.bias", bias);
  const auto path = temp_file("roundtrip.ckpt");
  save_checkpoint(src, path.string());

  ParameterStore dst;
  dst.add("layer.weight", Matrix::Zero(3, 4));
  dst.add("layer.bias", Matrix::Zero(1, 4));
  load_checkpoint(dst, path.string());
  CHECK(dst.get("layer.weight").value == w);
  CHECK(dst.get("layer.bias").value == bias);

  SUBCASE("shape mismatch") {
    ParameterStore other;
    other.add("layer.weight", Matrix::Zero(4, 3));
    other.add("layer.bias", Matrix::Zero(1, 4));
    CHECK_THROWS_AS(load_checkpoint(other, path.string()), ParseError);
  }
  SUBCASE("unknown name") {
    ParameterStore other;
    other.add("other.weight", Matrix::Zero(3, 4));
    other.add("layer.bias", Matrix::Zero(1, 4));
    CHECK_THROWS_AS(load_checkpoint(other, path.string()), ParseError);
  }
}

TEST_CASE("malformed checkpoints") {
  ParameterStore store;
  store.add("w", Matrix::Zero(1, 2));
  CHECK_THROWS_AS(load_checkpoint(store, "/nonexistent/ckpt"), ParseError);

  const auto empty = temp_file("empty.ckpt");
  write_text(empty, "");
  CHECK_THROWS_AS(load_checkpoint(store, empty.string()), ParseError);

  const auto header = temp_file("header.ckpt");
  write_text(header, "something else\n");
  try {
    load_checkpoint(store, header.string());
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 1);
  }

  // Produce a valid file, then damage a value.
  const auto good = temp_file("good.ckpt");
  save_checkpoint(store, good.string());
  std::ifstream in(good);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto pos = text.rfind('0');
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 1, "x");
  const auto bad = temp_file("bad.ckpt");
  write_text(bad, text);
  CHECK_THROWS_AS(load_checkpoint(store, bad.string()), ParseError);
}
