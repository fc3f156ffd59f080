#include "msvad/numcore/checkpoint.hpp"
#include "msvad/numcore/tape.hpp"

#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

using namespace msvad;
using msvad::testutil::check_gradients;
using msvad::testutil::random_matrix;

TEST_CASE("matmul basics") {
  Rng rng(1);
  Matrix a = random_matrix(3, 3, rng);
  Matrix eye(3, 3);
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;

  SECTION("A * I = A") {
    Matrix c = mm(a, eye);
    for (std::size_t i = 0; i < a.d.size(); ++i) REQUIRE(c.d[i] == Catch::Approx(a.d[i]));
  }
  SECTION("1x1 case") {
    Matrix x(1, 1), y(1, 1);
    x.d[0] = 2.0;
    y.d[0] = 3.0;
    REQUIRE(mm(x, y).d[0] == 6.0);
  }
  SECTION("matches triple-loop oracle") {
    Matrix l = random_matrix(5, 4, rng);
    Matrix r = random_matrix(4, 3, rng);
    Matrix c = mm(l, r);
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) acc += l.at(i, k) * r.at(k, j);
        REQUIRE(c.at(i, j) == Catch::Approx(acc).margin(1e-12));
      }
    }
  }
  SECTION("dimension mismatch throws") {
    Matrix bad = random_matrix(5, 5, rng);
    REQUIRE_THROWS_AS(mm(a, bad), std::invalid_argument);
  }
}

TEST_CASE("softmax rows") {
  Tape t;
  SECTION("uniform row") {
    Var x = t.constant(Matrix::filled(1, 4, 0.7));
    const Matrix& y = t.val(t.softmax_rows(x));
    for (int j = 0; j < 4; ++j) REQUIRE(y.at(0, j) == Catch::Approx(0.25));
  }
  SECTION("masked entry gets exactly zero") {
    Matrix x(1, 2);
    x.at(0, 0) = 0.0;
    x.at(0, 1) = 5.0;
    Matrix mask(1, 2);
    mask.at(0, 0) = 1.0;
    const Matrix& y = t.val(t.softmax_rows(t.constant(x), &mask));
    REQUIRE(y.at(0, 0) == 1.0);
    REQUIRE(y.at(0, 1) == 0.0);
  }
  SECTION("rows sum to one") {
    Rng rng(7);
    Var x = t.constant(random_matrix(6, 9, rng, -4.0, 4.0));
    const Matrix& y = t.val(t.softmax_rows(x));
    for (int r = 0; r < y.rows; ++r) {
      double s = 0.0;
      for (int j = 0; j < y.cols; ++j) s += y.at(r, j);
      REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
    }
  }
  SECTION("fully masked row throws") {
    Matrix mask(1, 3);  // all zero
    REQUIRE_THROWS_AS(t.softmax_rows(t.constant(Matrix::filled(1, 3, 1.0)), &mask),
                      std::invalid_argument);
  }
}

TEST_CASE("layernorm") {
  Tape t;
  SECTION("constant row maps to bias") {
    Rng rng(3);
    Matrix bias = random_matrix(1, 5, rng);
    Var y = t.layernorm(t.constant(Matrix::filled(2, 5, 3.25)),
                        t.constant(Matrix::filled(1, 5, 1.0)), t.constant(bias));
    for (int r = 0; r < 2; ++r)
      for (int j = 0; j < 5; ++j)
        REQUIRE(t.val(y).at(r, j) == Catch::Approx(bias.at(0, j)).margin(1e-9));
  }
  SECTION("unit affine on a standardized row is near-identity") {
    // population-standardized row: mean 0, variance 1
    Matrix x(1, 4);
    const double vals[4] = {1.0, -1.0, 1.0, -1.0};
    for (int j = 0; j < 4; ++j) x.at(0, j) = vals[j];
    Var y = t.layernorm(t.constant(x), t.constant(Matrix::filled(1, 4, 1.0)),
                        t.constant(Matrix(1, 4)));
    for (int j = 0; j < 4; ++j)
      REQUIRE(t.val(y).at(0, j) == Catch::Approx(vals[j]).margin(1e-4));
  }
}

TEST_CASE("backward bookkeeping") {
  SECTION("loss = sum(W) gives all-ones gradient") {
    ParamStore ps;
    Rng rng(5);
    Param& w = ps.create("w", 3, 4);
    testutil::fill_uniform(w.value, rng);
    ps.zero_grads();
    Tape t;
    Var loss = t.sum_all(t.use(w));
    t.backward(loss);
    for (double g : w.grad.d) REQUIRE(g == 1.0);
  }
  SECTION("loss = ||W||^2 / 2 gives dW = W") {
    ParamStore ps;
    Rng rng(6);
    Param& w = ps.create("w", 2, 3);
    testutil::fill_uniform(w.value, rng);
    ps.zero_grads();
    Tape t;
    Var wv = t.use(w);
    Var loss = t.scale(t.sum_all(t.hadamard(wv, wv)), 0.5);
    t.backward(loss);
    for (std::size_t i = 0; i < w.value.d.size(); ++i)
      REQUIRE(w.grad.d[i] == Catch::Approx(w.value.d[i]).margin(1e-12));
  }
  SECTION("backward twice without reset throws") {
    ParamStore ps;
    Param& w = ps.create("w", 1, 1);
    w.value.d[0] = 2.0;
    ps.zero_grads();
    Tape t;
    Var loss = t.sum_all(t.use(w));
    t.backward(loss);
    REQUIRE_THROWS_AS(t.backward(loss), std::runtime_error);
    t.reset();
  }
  SECTION("unused parameters keep zero gradients") {
    ParamStore ps;
    Rng rng(8);
    Param& used = ps.create("used", 2, 2);
    Param& unused = ps.create("unused", 2, 2);
    testutil::fill_uniform(used.value, rng);
    testutil::fill_uniform(unused.value, rng);
    ps.zero_grads();
    Tape t;
    Var loss = t.sum_all(t.use(used));
    t.backward(loss);
    for (double g : unused.grad.d) REQUIRE(g == 0.0);
  }
}

TEST_CASE("finite-difference gradient checks per op") {
  Rng rng(11);

  SECTION("matmul + add_rowvec + relu + sigmoid chain") {
    ParamStore ps;
    Param& a = ps.create("a", 3, 4);
    Param& b = ps.create("b", 4, 5);
    Param& v = ps.create("v", 1, 5);
    testutil::fill_uniform(a.value, rng);
    testutil::fill_uniform(b.value, rng);
    testutil::fill_uniform(v.value, rng);
    auto res = check_gradients(ps, [&](Tape& t) {
      Var y = t.sigmoid(t.relu(t.add_rowvec(t.matmul(t.use(a), t.use(b)), t.use(v))));
      return t.sum_all(y);
    });
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-4);
  }

  SECTION("matmul_nt, hadamard, sub, scale") {
    ParamStore ps;
    Param& a = ps.create("a", 3, 4);
    Param& b = ps.create("b", 2, 4);
    Param& c = ps.create("c", 3, 2);
    testutil::fill_uniform(a.value, rng);
    testutil::fill_uniform(b.value, rng);
    testutil::fill_uniform(c.value, rng);
    auto res = check_gradients(ps, [&](Tape& t) {
      Var y = t.matmul_nt(t.use(a), t.use(b));
      Var z = t.hadamard(y, t.use(c));
      return t.sum_all(t.scale(t.sub(z, y), 0.7));
    });
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-4);
  }

  SECTION("softmax with causal-style mask") {
    ParamStore ps;
    Param& a = ps.create("a", 4, 4);
    Param& w = ps.create("w", 4, 4);
    testutil::fill_uniform(a.value, rng);
    testutil::fill_uniform(w.value, rng);
    Matrix mask(4, 4);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c <= r; ++c) mask.at(r, c) = 1.0;
    auto res = check_gradients(ps, [&](Tape& t) {
      Var p = t.softmax_rows(t.use(a), &mask);
      return t.sum_all(t.hadamard(p, t.use(w)));
    });
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-4);
  }

  SECTION("layernorm") {
    ParamStore ps;
    Param& x = ps.create("x", 3, 6);
    Param& g = ps.create("g", 1, 6);
    Param& b = ps.create("b", 1, 6);
    testutil::fill_uniform(x.value, rng);
    testutil::fill_uniform(g.value, rng, 0.5, 1.5);
    testutil::fill_uniform(b.value, rng);
    Matrix wsum = random_matrix(3, 6, rng);
    auto res = check_gradients(ps, [&](Tape& t) {
      Var y = t.layernorm(t.use(x), t.use(g), t.use(b));
      return t.sum_all(t.hadamard(y, t.constant(wsum)));
    });
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-4);
  }

  SECTION("mean_rows, prefix_mean_rows, rows_dot, slices and concats") {
    ParamStore ps;
    Param& x = ps.create("x", 5, 6);
    Param& y = ps.create("y", 5, 6);
    testutil::fill_uniform(x.value, rng);
    testutil::fill_uniform(y.value, rng);
    Matrix wsum = random_matrix(5, 1, rng);
    auto res = check_gradients(ps, [&](Tape& t) {
      Var xs = t.concat_cols({t.slice_cols(t.use(x), 0, 3), t.slice_cols(t.use(x), 3, 6)});
      Var p = t.prefix_mean_rows(xs);
      Var d = t.rows_dot(p, t.use(y));
      Var pooled = t.mean_rows(t.use(y));
      Var stacked = t.concat_rows({pooled, pooled});
      return t.add(t.sum_all(t.hadamard(d, t.constant(wsum))), t.sum_all(stacked));
    });
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-4);
  }

  SECTION("weighted_bce") {
    ParamStore ps;
    Param& z = ps.create("z", 6, 2);
    testutil::fill_uniform(z.value, rng, -2.0, 2.0);
    Rng lrng(21);
    Matrix target(6, 2), mask(6, 2);
    for (std::size_t i = 0; i < target.d.size(); ++i) {
      target.d[i] = lrng.uniform01() < 0.5 ? 0.0 : 1.0;
      mask.d[i] = lrng.uniform01() < 0.8 ? 1.0 : 0.0;
    }
    auto res = check_gradients(ps, [&](Tape& t) {
      return t.weighted_bce(t.sigmoid(t.use(z)), target, mask, 0.6);
    });
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("dropout") {
  ParamStore ps;
  Rng rng(31);
  Param& x = ps.create("x", 8, 8);
  testutil::fill_uniform(x.value, rng);
  ps.zero_grads();

  SECTION("rate 0 is the identity") {
    Tape t;
    Var in = t.use(x);
    Var out = t.dropout(in, 0.0, &rng, true);
    REQUIRE(out.i == in.i);
  }
  SECTION("eval mode is the identity") {
    Tape t;
    Var in = t.use(x);
    Var out = t.dropout(in, 0.5, nullptr, false);
    REQUIRE(out.i == in.i);
  }
  SECTION("surviving entries are scaled by 1/keep and backward reuses the mask") {
    Tape t;
    Rng drng(77);
    Var in = t.use(x);
    Var out = t.dropout(in, 0.25, &drng, true);
    const Matrix& y = t.val(out);
    int survivors = 0;
    for (std::size_t i = 0; i < y.d.size(); ++i) {
      if (y.d[i] != 0.0) {
        REQUIRE(y.d[i] == Catch::Approx(x.value.d[i] / 0.75));
        ++survivors;
      }
    }
    REQUIRE(survivors > 0);
    t.backward(t.sum_all(out));
    for (std::size_t i = 0; i < y.d.size(); ++i) {
      const double expect = y.d[i] == 0.0 && x.value.d[i] != 0.0 ? 0.0 : 1.0 / 0.75;
      REQUIRE(x.grad.d[i] == Catch::Approx(expect));
    }
  }
}

TEST_CASE("flat container round trip") {
  Rng rng(41);
  FlatContainer fc;
  fc.meta_json = R"({"hello":"world","pi":3.141592653589793})";
  fc.add("a", random_matrix(3, 7, rng));
  fc.add("nested.name.b", random_matrix(1, 1, rng));
  const std::string path =
      (std::filesystem::temp_directory_path() / "msvad_test_container.bin").string();
  fc.save(path);
  FlatContainer back = FlatContainer::load(path);
  REQUIRE(back.meta_json == fc.meta_json);
  REQUIRE(back.entries.size() == fc.entries.size());
  for (std::size_t i = 0; i < fc.entries.size(); ++i) {
    REQUIRE(back.entries[i].first == fc.entries[i].first);
    REQUIRE(back.entries[i].second.d == fc.entries[i].second.d);  // bit-exact
  }
  std::remove(path.c_str());
}
