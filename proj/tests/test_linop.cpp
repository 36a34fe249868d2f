#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"

using namespace sell;

namespace {

class EveryKind : public ::testing::TestWithParam<Kind> {};

std::string kind_param_name(const ::testing::TestParamInfo<Kind> &info) {
  return std::string(kind_name(info.param));
}

} // namespace

TEST_P(EveryKind, ZeroInputGivesZeroOutput) {
  std::mt19937_64 gen(100 + int(GetParam()));
  for (int i = 0; i < 5; ++i) {
    const Built b = build(oracle::random_spec(GetParam(), gen));
    const Vector y = apply(b.spec, b.params, Vector(b.spec.n_in, 0.0));
    ASSERT_EQ(y.size(), b.spec.n_out);
    for (double v : y)
      EXPECT_EQ(v, 0.0);
  }
}

TEST_P(EveryKind, Linearity) {
  std::mt19937_64 gen(200 + int(GetParam()));
  for (int i = 0; i < 10; ++i) {
    const Built b = build(oracle::random_spec(GetParam(), gen));
    const auto x = oracle::random_vector(b.spec.n_in, gen);
    const auto z = oracle::random_vector(b.spec.n_in, gen);
    const double alpha = 1.7, beta = -0.3;
    Vector mix(x.size());
    for (std::size_t k = 0; k < x.size(); ++k)
      mix[k] = alpha * x[k] + beta * z[k];
    const Vector lhs = apply(b.spec, b.params, mix);
    const Vector ax = apply(b.spec, b.params, x);
    const Vector az = apply(b.spec, b.params, z);
    Vector rhs(lhs.size());
    for (std::size_t k = 0; k < lhs.size(); ++k)
      rhs[k] = alpha * ax[k] + beta * az[k];
    EXPECT_LT(oracle::relative_error(lhs, rhs), 1e-9);
  }
}

TEST_P(EveryKind, MaterializeMatchesApplyColumns) {
  std::mt19937_64 gen(300 + int(GetParam()));
  for (int i = 0; i < 10; ++i) {
    const Built b = build(oracle::random_spec(GetParam(), gen));
    const DenseTensor m = materialize(b.spec, b.params);
    ASSERT_EQ(m.shape, (std::vector<std::size_t>{b.spec.n_out, b.spec.n_in}));
    Vector e(b.spec.n_in, 0.0);
    for (std::size_t j = 0; j < b.spec.n_in; ++j) {
      e[j] = 1.0;
      const Vector col = apply(b.spec, b.params, e);
      e[j] = 0.0;
      for (std::size_t r = 0; r < b.spec.n_out; ++r)
        EXPECT_LT(std::abs(col[r] - m(r, j)), 1e-10);
    }
    const auto x = oracle::random_vector(b.spec.n_in, gen);
    EXPECT_LT(oracle::relative_error(apply(b.spec, b.params, x), detail::matvec(m, x)), 1e-9);
  }
}

TEST_P(EveryKind, ConstructionIsDeterministic) {
  std::mt19937_64 gen(400 + int(GetParam()));
  const OperatorSpec spec = oracle::random_spec(GetParam(), gen);
  EXPECT_EQ(build(spec).params, build(spec).params);
  const auto x = oracle::random_vector(spec.n_in, gen);
  const Built b = build(spec);
  EXPECT_EQ(apply(spec, b.params, x), apply(spec, b.params, x));
}

TEST_P(EveryKind, ParamCountMatchesStorage) {
  std::mt19937_64 gen(500 + int(GetParam()));
  for (int i = 0; i < 200; ++i) {
    const OperatorSpec spec = oracle::random_spec(GetParam(), gen);
    const Built b = build(spec);
    EXPECT_EQ(param_count(spec), b.params.flat.size());
    EXPECT_TRUE(b.params.partition_is_exact());
  }
}

TEST_P(EveryKind, WrongInputLengthRejected) {
  std::mt19937_64 gen(600 + int(GetParam()));
  const Built b = build(oracle::random_spec(GetParam(), gen));
  EXPECT_THROW(apply(b.spec, b.params, Vector(b.spec.n_in + 1, 1.0)), ShapeError);
}

TEST_P(EveryKind, JsonRoundTrip) {
  std::mt19937_64 gen(700 + int(GetParam()));
  const OperatorSpec spec = oracle::random_spec(GetParam(), gen);
  const nlohmann::json j = spec;
  EXPECT_EQ(j.at("kind").get<std::string>(), kind_name(GetParam()));
  EXPECT_EQ(nlohmann::json::parse(j.dump()).get<OperatorSpec>(), spec);
}

TEST_P(EveryKind, CostReportInvariants) {
  std::mt19937_64 gen(800 + int(GetParam()));
  const OperatorSpec spec = oracle::random_spec(GetParam(), gen);
  const CostReport c = cost_report(spec);
  EXPECT_EQ(c.dense_multadds, std::int64_t(spec.n_out * spec.n_in));
  EXPECT_EQ(c.dense_params, c.dense_multadds);
  EXPECT_DOUBLE_EQ(c.param_ratio, double(c.params) / double(c.dense_params));
  EXPECT_EQ(c.multadds.has_value(), c.multadd_ratio.has_value());
}

INSTANTIATE_TEST_SUITE_P(AllKinds, EveryKind, ::testing::ValuesIn(kAllKinds), kind_param_name);

TEST(Apply, DenseIdentity) {
  Built b = build_dense(4, 4, 0);
  std::fill(b.params.flat.begin(), b.params.flat.end(), 0.0);
  for (std::size_t i = 0; i < 4; ++i)
    b.params.flat[i * 4 + i] = 1.0;
  EXPECT_EQ(apply(b.spec, b.params, Vector{1, 2, 3, 4}), (Vector{1, 2, 3, 4}));
  EXPECT_EQ(materialize(b.spec, b.params).values, b.params.flat);
}

TEST(Apply, MismatchedParamsRejected) {
  const Built a = build_dense(4, 4, 0);
  const Built r = build_rf(4, 4, 2, 0);
  EXPECT_THROW(apply(r.spec, a.params, Vector(4, 1.0)), SpecError);
}

TEST(ParamCount, ClosedForms) {
  EXPECT_EQ(param_count({100, 100, DenseHyper{}, 0}), 10000u);
  EXPECT_EQ(param_count({100, 100, RfHyper{25}, 0}), 5000u);
  EXPECT_EQ(param_count({64, 64, AcdcHyper{12}, 0}), 1536u);
  EXPECT_EQ(param_count({256, 256, TtHyper{8}, 0}), 4608u);
  EXPECT_EQ(param_count({8, 8, ShuffleHyper{2}, 0}), 64u);
  EXPECT_EQ(param_count({16, 16, ShuffleHyper{1}, 0}), 2u * 16 * 16);
  EXPECT_EQ(param_count({10, 7, HashedHyper{13}, 0}), 13u);
  // (4,4,4) at R = (2,2,2): 8 + 3 * 8
  EXPECT_EQ(reshape3(8, 8).dims, (std::array<std::size_t, 3>{4, 4, 4}));
  EXPECT_EQ(param_count({8, 8, TuckerHyper{0.5}, 0}), 32u);
}

TEST(MultAdds, ClosedForms) {
  EXPECT_EQ(multadd_count({100, 100, DenseHyper{}, 0}), 10000);
  EXPECT_EQ(multadd_count({100, 100, HashedHyper{17}, 0}), 10000);
  EXPECT_EQ(multadd_count({30, 20, RfHyper{4}, 0}), 4 * 20 + 30 * 4);
  EXPECT_EQ(multadd_count({16, 16, ShuffleHyper{4}, 0}), 2 * 16 * 16 / 4);
  EXPECT_FALSE(multadd_count({256, 256, TtHyper{8}, 0}).has_value());
  EXPECT_FALSE(multadd_count({256, 256, TuckerHyper{0.5}, 0}).has_value());
  CostModel materialised;
  materialised.materialise_tt_tucker = true;
  EXPECT_GT(*multadd_count({256, 256, TtHyper{8}, 0}, materialised), 65536);
  EXPECT_GT(*multadd_count({256, 256, TuckerHyper{0.5}, 0}, materialised), 65536);
}

TEST(MultAdds, AcdcAgainstDenseAroundCalibratedWidth) {
  for (std::size_t n : {64, 256, 600, 624})
    EXPECT_GE(*multadd_count({n, n, AcdcHyper{12}, 0}), std::int64_t(n * n)) << n;
  for (std::size_t n : {626, 1024, 4096})
    EXPECT_LT(*multadd_count({n, n, AcdcHyper{12}, 0}), std::int64_t(n * n)) << n;
}

TEST(Validate, RejectsOutOfRangeHyperparameters) {
  EXPECT_THROW(validate({7, 7, AcdcHyper{1}, 0}), SpecError);
  EXPECT_THROW(validate({8, 6, AcdcHyper{1}, 0}), SpecError);
  EXPECT_THROW(validate({8, 8, AcdcHyper{0}, 0}), SpecError);
  EXPECT_THROW(validate({8, 8, TtHyper{0}, 0}), SpecError);
  EXPECT_THROW(validate({8, 8, TuckerHyper{0.0}, 0}), SpecError);
  EXPECT_THROW(validate({8, 8, TuckerHyper{1.5}, 0}), SpecError);
  EXPECT_THROW(validate({8, 4, RfHyper{5}, 0}), SpecError);
  EXPECT_THROW(validate({8, 4, RfHyper{0}, 0}), SpecError);
  EXPECT_THROW(validate({2, 2, HashedHyper{5}, 0}), SpecError);
  EXPECT_THROW(validate({2, 2, HashedHyper{0}, 0}), SpecError);
  EXPECT_THROW(validate({12, 12, ShuffleHyper{5}, 0}), SpecError);
  EXPECT_THROW(validate({0, 3, DenseHyper{}, 0}), SpecError);
  EXPECT_THROW(build_acdc(7, 1, 0), SpecError);
}

TEST(ParseKind, AcceptsAbbreviations) {
  EXPECT_EQ(parse_kind("TT"), Kind::TensorTrain);
  EXPECT_EQ(parse_kind("RF"), Kind::RankFactorised);
  EXPECT_EQ(parse_kind("Tucker"), Kind::Tucker);
  EXPECT_THROW(parse_kind("Conv"), SpecError);
}

TEST(SpecJson, MalformedRejected) {
  EXPECT_THROW(nlohmann::json::parse(R"({"kind":"TT","n_out":4,"n_in":4,"hyper":{}})").get<OperatorSpec>(),
               SpecError);
  EXPECT_THROW(nlohmann::json::parse(R"({"kind":"Nope","n_out":4,"n_in":4})").get<OperatorSpec>(),
               SpecError);
}
