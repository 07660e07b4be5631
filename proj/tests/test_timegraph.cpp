#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "oracle.hpp"
#include "support.hpp"
#include "tgcrn/errors.hpp"
#include "tgcrn/timegraph.hpp"

using namespace tgcrn;
using numerics::Tensor;

namespace {

SlotMatrix consecutive_rows(std::size_t rows, std::size_t cols, std::size_t slots,
                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> start(0, slots - cols);
  SlotMatrix m(rows);
  for (auto& row : m) {
    const std::size_t s = start(rng);
    for (std::size_t c = 0; c < cols; ++c) row.push_back(TimeIndex(s + c));
  }
  return m;
}

std::size_t gap(TimeIndex a, TimeIndex b) { return a.slot > b.slot ? a.slot - b.slot : b.slot - a.slot; }

Tensor column(std::initializer_list<double> v) { return Tensor({v.size(), 1}, std::vector<double>(v)); }

std::string describe(const TimeDistanceSamples& s) {
  std::ostringstream out;
  for (std::size_t b = 0; b < s.size(); ++b) {
    out << s.anchor_at[b].row << ',' << s.anchor_at[b].column << ' ' << s.adjacent_at[b].row << ','
        << s.adjacent_at[b].column << ' ' << s.mid_at[b].row << ',' << s.mid_at[b].column << ' '
        << s.distant_at[b].row << ',' << s.distant_at[b].column << ' ' << s.anchors[b].slot << ' '
        << s.adjacents[b].slot << ' ' << s.mids[b].slot << ' ' << s.distants[b].slot << '\n';
  }
  return out.str();
}

}  // namespace

TEST_CASE("discretize examples") {
  const ServiceDay day{0, 15, 96};
  CHECK(discretize_time(480, day) == TimeIndex(32));
  CHECK(discretize_time(0, day) == TimeIndex(0));
  CHECK(discretize_time(14, day) == TimeIndex(0));
  CHECK(discretize_time(1439, day) == TimeIndex(95));
}

TEST_CASE("discretize rejects timestamps outside the service span") {
  const ServiceDay metro{330, 15, 73};
  CHECK(discretize_time(330, metro) == TimeIndex(0));
  CHECK(discretize_time(330 + 72 * 15, metro) == TimeIndex(72));
  try {
    discretize_time(329, metro);
    FAIL("expected OutOfRangeError");
  } catch (const OutOfRangeError& e) {
    CHECK(std::string(e.what()).find("329") != std::string::npos);
  }
  CHECK_THROWS_AS(discretize_time(330 + 73 * 15, metro), OutOfRangeError);
  CHECK_THROWS_AS(discretize_time(-1, ServiceDay{}), OutOfRangeError);
  CHECK_THROWS_AS(discretize_time(1440, ServiceDay{}), OutOfRangeError);
}

TEST_CASE("predecessor wraps or clamps at the first slot") {
  CHECK(predecessor(TimeIndex(5), 8, PredecessorRule::kWrap) == TimeIndex(4));
  CHECK(predecessor(TimeIndex(0), 8, PredecessorRule::kWrap) == TimeIndex(7));
  CHECK(predecessor(TimeIndex(0), 8, PredecessorRule::kClamp) == TimeIndex(0));
  CHECK_THROWS_AS(predecessor(TimeIndex(8), 8, PredecessorRule::kWrap), OutOfRangeError);
}

TEST_CASE("embedding tables are seeded and bounded") {
  const auto a = EmbeddingTables::init(5, 4, 10, 9, 3);
  const auto b = EmbeddingTables::init(5, 4, 10, 9, 3);
  const auto c = EmbeddingTables::init(5, 4, 10, 9, 4);
  CHECK(a.node_table.value == b.node_table.value);
  CHECK(a.time_table.value == b.time_table.value);
  CHECK_FALSE(a.time_table.value == c.time_table.value);
  CHECK(a.num_nodes() == 5);
  CHECK(a.num_slots() == 10);
  for (double v : a.node_table.value.data()) CHECK(std::abs(v) <= 0.5);
  for (double v : a.time_table.value.data()) CHECK(std::abs(v) <= 1.0 / 3.0);
}

TEST_CASE("sampler invariants over 10k seeded draws") {
  const SamplingRanges ranges{2, 0};
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto batch = consecutive_rows(4, 8, 48, seed);
    const auto s = sample_time_distances(batch, ranges, seed);
    REQUIRE(s.size() == 4);
    for (std::size_t b = 0; b < s.size(); ++b) {
      const std::size_t adj = gap(s.anchors[b], s.adjacents[b]);
      REQUIRE(adj >= 1);
      REQUIRE(adj <= 2);
      REQUIRE(gap(s.anchors[b], s.mids[b]) > 2);
      REQUIRE(s.distant_at[b].row != s.anchor_at[b].row);
      REQUIRE(s.anchor_at[b].row == b);
      REQUIRE(batch[b][s.anchor_at[b].column] == s.anchors[b]);
      REQUIRE(batch[s.distant_at[b].row][s.distant_at[b].column] == s.distants[b]);
    }
  }
}

TEST_CASE("half-window adjacent range keeps adjacent gaps in {1,2}") {
  const std::size_t history = 4;
  const SamplingRanges ranges{history / 2, 0};
  std::size_t seen[3] = {0, 0, 0};
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto s = sample_time_distances(consecutive_rows(3, 8, 96, seed + 77), ranges, seed);
    for (std::size_t b = 0; b < s.size(); ++b) {
      const std::size_t g = gap(s.anchors[b], s.adjacents[b]);
      REQUIRE((g == 1 || g == 2));
      ++seen[g];
    }
  }
  CHECK(seen[1] > 0);
  CHECK(seen[2] > 0);
}

TEST_CASE("two-column row has a single adjacent candidate") {
  const std::vector<TimeIndex> row{TimeIndex(10), TimeIndex(11)};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    CHECK(pick_adjacent(row, 0, 1, rng) == std::optional<std::size_t>(1));
    CHECK(pick_adjacent(row, 1, 1, rng) == std::optional<std::size_t>(0));
  }
}

TEST_CASE("sampler errors") {
  CHECK_THROWS_AS(sample_time_distances(consecutive_rows(1, 8, 20, 1), {1, 0}, 1), ContractError);
  // With only two columns the mid band beyond the adjacent range is empty.
  CHECK_THROWS_AS(sample_time_distances(consecutive_rows(2, 2, 20, 1), {1, 0}, 1), ConfigError);
  CHECK_THROWS_AS(sample_time_distances(consecutive_rows(2, 4, 20, 1), {3, 0}, 1), ConfigError);
  CHECK_THROWS_AS(sample_time_distances(consecutive_rows(2, 4, 20, 1), {0, 0}, 1), ConfigError);
}

TEST_CASE("sampler is deterministic and matches the frozen seed-42 draw") {
  SlotMatrix batch;
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<TimeIndex> row;
    for (std::size_t c = 0; c < 8; ++c) row.push_back(TimeIndex(r * 9 + c));
    batch.push_back(row);
  }
  const auto first = describe(sample_time_distances(batch, {2, 0}, 42));
  CHECK(first == describe(sample_time_distances(batch, {2, 0}, 42)));
  CHECK(first != describe(sample_time_distances(batch, {2, 0}, 43)));

  const std::string path = std::string(TGCRN_GOLDEN_DIR) + "/sampler_seed42.txt";
  if (std::getenv("TGCRN_WRITE_GOLDEN")) testing::write_file(path, first);
  const std::string frozen = testing::read_file(path);
  REQUIRE_FALSE(frozen.empty());
  CHECK(first == frozen);
}

TEST_CASE("discrepancy loss examples") {
  Tape tape;
  SUBCASE("linear embeddings give zero loss") {
    Tensor table({10, 1});
    for (std::size_t t = 0; t < 10; ++t) table[t] = -2.5 * static_cast<double>(t);
    const Var tt = tape.constant(table);
    const auto s = sample_time_distances(consecutive_rows(6, 10, 10, 5), {2, 0}, 5);
    CHECK(time_discrepancy_loss(tt, s).value().item() == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("quadratic embeddings") {
    Tensor table({7, 1});
    for (std::size_t t = 0; t < 7; ++t) table[t] = static_cast<double>(t * t);
    TimeDistanceSamples s;
    s.anchors = {TimeIndex(0)};
    s.adjacents = {TimeIndex(1)};
    s.mids = {TimeIndex(3)};
    s.distants = {TimeIndex(6)};
    CHECK(time_discrepancy_loss(tape.constant(table), s).value().item() ==
          doctest::Approx(10.0).epsilon(1e-12));
  }
  SUBCASE("zero distance on the adjacent sample is a hard failure") {
    TimeDistanceSamples s;
    s.anchors = s.adjacents = {TimeIndex(2)};
    s.mids = {TimeIndex(5)};
    s.distants = {TimeIndex(6)};
    CHECK_THROWS_AS(time_discrepancy_loss(tape.constant(Tensor({7, 2}, 1.0)), s), ContractError);
  }
}

TEST_CASE("discrepancy loss is non-negative and zero only for equal ratios") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Tape tape;
    const Var table = tape.constant(testing::random_tensor({24, 3}, seed));
    const auto s = sample_time_distances(consecutive_rows(5, 8, 24, seed), {2, 0}, seed);
    CHECK(time_discrepancy_loss(table, s).value().item() > 0.0);
  }
}

TEST_CASE("discrepancy loss gradient matches finite differences") {
  Parameter table{"time", testing::random_tensor({16, 4}, 9)};
  const auto s = sample_time_distances(consecutive_rows(6, 8, 16, 2), {2, 0}, 2);
  const auto checks = testing::gradient_check({&table}, [&](Tape& t) {
    return time_discrepancy_loss(t.parameter(table), s);
  });
  Tape t;
  const auto grads = t.backward(time_discrepancy_loss(t.parameter(table), s));
  double norm = 0;
  for (double g : grads.at(table).data()) norm += g * g;
  CHECK(norm > 0);
  CHECK(checks[0].rel_error < 1e-6);
}

TEST_CASE("static affinity examples") {
  Tape t;
  CHECK(static_affinity(t.constant(Tensor::matrix({{1, 0}, {0, 1}}))).value() ==
        Tensor::matrix({{1, 0}, {0, 1}}));
  CHECK(static_affinity(t.constant(Tensor::matrix({{1, 1}, {1, 1}}))).value() ==
        Tensor::matrix({{2, 2}, {2, 2}}));
  CHECK(static_affinity(t.constant(Tensor::matrix({{2}}))).value() == Tensor::matrix({{4}}));
}

TEST_CASE("trend factor examples") {
  Tape t;
  const Var table = t.constant(Tensor::matrix({{3, 4}, {1, 2}, {0, 0}, {0.6, 0.8}}));
  CHECK(trend_factor(table, TimeIndex(1), PredecessorRule::kWrap).value().item() == 11.0);
  CHECK(trend_factor(table, TimeIndex(2), PredecessorRule::kWrap).value().item() == 0.0);
  CHECK(trend_factor(table, TimeIndex(3), PredecessorRule::kWrap).value().item() == 0.0);
  // Slot 0 wraps to slot 3; clamping pairs it with itself.
  CHECK(trend_factor(table, TimeIndex(0), PredecessorRule::kWrap).value().item() ==
        doctest::Approx(5.0));
  const Var unit = t.constant(Tensor::matrix({{0.6, 0.8}, {1, 1}}));
  CHECK(trend_factor(unit, TimeIndex(0), PredecessorRule::kClamp).value().item() ==
        doctest::Approx(1.0).epsilon(1e-15));
  const TimeIndex slots[] = {TimeIndex(1), TimeIndex(2)};
  const Tensor batched = trend_factors(table, slots, PredecessorRule::kWrap).value();
  CHECK(batched.shape() == numerics::Shape{2, 1});
  CHECK(batched[0] == 11.0);
  CHECK(batched[1] == 0.0);
}

TEST_CASE("periodic discriminant examples") {
  Tape t;
  CHECK(periodic_discriminant(t.constant(Tensor({3, 2})), 3).value() == Tensor({3, 3}));
  const Tensor d = periodic_discriminant(t.constant(Tensor::matrix({{1}, {-1}})), 2).value();
  CHECK(d(0, 0) == doctest::Approx(0.7616).epsilon(1e-4));
  CHECK(d(0, 1) == doctest::Approx(-0.7616).epsilon(1e-4));
  CHECK(d(1, 0) == doctest::Approx(-0.7616).epsilon(1e-4));
  CHECK(d(1, 1) == doctest::Approx(0.7616).epsilon(1e-4));
  const Tensor big = periodic_discriminant(t.constant(Tensor::matrix({{30}, {-40}})), 2).value();
  CHECK(big(0, 0) == doctest::Approx(1.0));
  CHECK(big(0, 1) == doctest::Approx(-1.0));
  // Stacked samples are handled block by block.
  const Tensor two = periodic_discriminant(t.constant(Tensor::matrix({{1}, {-1}, {0}, {0}})), 2).value();
  CHECK(two.shape() == numerics::Shape{4, 2});
  CHECK(two(2, 0) == 0.0);
  CHECK(two(1, 1) == doctest::Approx(0.7616).epsilon(1e-4));
}

TEST_CASE("adjacency examples") {
  Tape t;
  const Var one = t.constant(Tensor::matrix({{1}}));
  const auto g = time_aware_adjacency(one, t.constant(column({0.5})),
                                      t.constant(Tensor::matrix({{0}})), 0.3);
  CHECK(g.raw.value().item() == doctest::Approx(1.725).epsilon(1e-15));
  CHECK(g.propagation.value().item() == doctest::Approx(1.0));

  const Var aff = t.constant(Tensor::matrix({{1, 2}, {2, -1}}));
  const auto flat = time_aware_adjacency(aff, t.constant(column({0.25})),
                                         t.constant(Tensor::matrix({{0.9, -0.3}, {-0.3, 0.1}})), 0.0);
  CHECK(flat.raw.value() == Tensor::matrix({{1.25, 2.25}, {2.25, -0.75}}));
  const auto none = time_aware_adjacency(aff, t.constant(column({0.25})), Var{}, 0.3);
  CHECK(none.raw.value() == flat.raw.value());
  CHECK_THROWS_AS(time_aware_adjacency(aff, t.constant(column({0.0})), Var{}, -0.1), ConfigError);
}

TEST_CASE("multiplier stays within the saturation bounds") {
  const double lo = 1 + 0.3 * oracle::sigmoid(-1), hi = 1 + 0.3 * oracle::sigmoid(1);
  CHECK(lo == doctest::Approx(1.0807).epsilon(1e-4));
  CHECK(hi == doctest::Approx(1.2193).epsilon(1e-4));
  Tape t;
  const Tensor x = testing::random_tensor({6, 3}, 11, -3, 3);
  const auto g = time_aware_adjacency(t.constant(Tensor({6, 6}, 1.0)), t.constant(column({0.0})),
                                      periodic_discriminant(t.constant(x), 6), 0.3);
  for (double m : g.raw.value().data()) {
    CHECK(m > lo);
    CHECK(m < hi);
  }
}

TEST_CASE("graph matches the nested-vector oracle and is symmetric") {
  const std::size_t n = 5;
  const Tensor nodes = testing::random_tensor({n, 3}, 21);
  const Tensor times = testing::random_tensor({8, 4}, 22);
  const Tensor x = testing::random_tensor({n, 2}, 23, -2, 2);
  Tape t;
  const Var time_var = t.constant(times);
  const TimeIndex slot(3);
  const auto g = time_aware_adjacency(static_affinity(t.constant(nodes)),
                                      trend_factor(time_var, slot, PredecessorRule::kWrap),
                                      periodic_discriminant(t.constant(x), n), 0.3, {slot});
  auto rows = [](const Tensor& m) {
    oracle::Mat out(m.rows(), oracle::Vec(m.cols()));
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
    return out;
  };
  const auto tm = rows(times);
  const auto expected = oracle::raw_adjacency(rows(nodes), tm[3], tm[2], rows(x), 0.3, true);
  const auto expected_prop = oracle::softmax_rows(expected);
  const Tensor& raw = g.raw.value();
  const Tensor& prop = g.propagation.value();
  for (std::size_t i = 0; i < n; ++i) {
    double row_sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      CHECK(raw(i, j) == doctest::Approx(expected[i][j]).epsilon(1e-12));
      CHECK(prop(i, j) == doctest::Approx(expected_prop[i][j]).epsilon(1e-12));
      CHECK(std::abs(raw(i, j) - raw(j, i)) < 1e-9);
      row_sum += prop(i, j);
    }
    CHECK(std::abs(row_sum - 1.0) < 1e-9);
  }
  CHECK(g.slots == std::vector<TimeIndex>{slot});
}

TEST_CASE("identical time rows with zero saturation collapse to one graph") {
  Tensor times({6, 3});
  for (std::size_t s = 0; s < 6; ++s)
    for (std::size_t k = 0; k < 3; ++k) times(s, k) = 0.1 * static_cast<double>(k + 1);
  Tape t;
  const Var aff = static_affinity(t.constant(testing::random_tensor({4, 2}, 5)));
  const Var disc = periodic_discriminant(t.constant(testing::random_tensor({4, 2}, 6)), 4);
  const Var tv = t.constant(times);
  const Tensor first =
      time_aware_adjacency(aff, trend_factor(tv, TimeIndex(0), PredecessorRule::kWrap), disc, 0.0).raw.value();
  for (std::size_t s = 1; s < 6; ++s) {
    CHECK(time_aware_adjacency(aff, trend_factor(tv, TimeIndex(s), PredecessorRule::kWrap), disc, 0.0)
              .raw.value() == first);
  }
}
