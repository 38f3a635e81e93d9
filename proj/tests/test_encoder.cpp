#include <gtest/gtest.h>

#include "ecvit/encoder.hpp"
#include "ecvit/error.hpp"
#include "ecvit/verify/oracles.hpp"
#include "ecvit/verify/suites.hpp"

using namespace ecvit;
using TF = Tensor<float>;

namespace {

EncoderParams<float> random_encoder(std::int64_t D, std::int64_t heads, Rng& rng, FfnSpec ffn = {}) {
  auto p = make_encoder<float>(D, heads, 3, ffn, rng);
  for (auto* t : {&p.qkv, &p.attn_out.weight, &p.attn_out.bias}) {
    for (auto& v : t->mutable_values()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
  }
  return p;
}

void zero(TF& t) {
  for (auto& v : t.mutable_values()) v = 0.0f;
}

}  // namespace

TEST(Partition, BlockCounts) {
  Rng rng(1);
  const TF x = verify::random_tensor<float>({2, 15, 4}, rng);
  const auto blocks = partition(x, 7);
  ASSERT_EQ(blocks.size(), 2u);
  for (const auto& b : blocks) EXPECT_EQ(b.shape(), (Shape{2, 8, 4}));
  EXPECT_EQ(partition(TF({1, 197, 2}), 7).size(), 28u);
}

TEST(Partition, ReassemblesPatchesExactly) {
  Rng rng(2);
  const TF x = verify::random_tensor<float>({2, 13, 3}, rng);
  std::vector<TF> parts{slice(x, 1, 0, 1)};
  for (const auto& b : partition(x, 4)) {
    EXPECT_EQ(slice(b, 1, 0, 1).to_vector(), parts[0].to_vector());
    parts.push_back(slice(b, 1, 1, 4));
  }
  EXPECT_EQ(concat(parts, 1).to_vector(), x.to_vector());
}

TEST(Partition, DivisibilityErrorNamesBoth) {
  try {
    (void)partition(TF({1, 15, 2}), 4);
    FAIL();
  } catch (const DivisibilityError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("14"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4"), std::string::npos) << msg;
  }
  Rng rng(3);
  auto p = random_encoder(4, 1, rng);
  EXPECT_THROW(pmsa(TF({1, 15, 4}), p, {1, 4, true}), DivisibilityError);
}

TEST(Pmsa, SingleBlockIsGlobalBitwise) {
  Rng rng(4);
  auto p = random_encoder(8, 2, rng);
  const TF x = verify::random_tensor<float>({3, 7, 8}, rng);
  EXPECT_EQ(pmsa(x, p, {2, 6, true}).to_vector(), global_msa(x, p).to_vector());
}

TEST(Pmsa, MatchesPerBlockOracle) {
  Rng rng(5);
  auto p = random_encoder(4, 1, rng);
  const TF x = verify::random_tensor<float>({1, 5, 4}, rng, -1, 1);
  const auto y = verify::as_doubles(pmsa(x, p, {1, 2, true}));
  const auto ref = oracle::pmsa(verify::as_doubles(x), 1, 4, 4, 2, verify::as_doubles(p.qkv),
                                verify::as_doubles(p.attn_out.weight), verify::as_doubles(p.attn_out.bias), 1);
  ASSERT_EQ(y.size(), ref.size());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-6);
}

TEST(Pmsa, EqualBlockClassOutputsMergeToThatValue) {
  Rng rng(6);
  auto p = random_encoder(8, 2, rng);
  const TF one = verify::random_tensor<float>({1, 4, 8}, rng);  // cls + 3 patches
  const TF twice = concat<float>({one, slice(one, 1, 1, 3)}, 1);
  const TF a = pmsa(one, p, {2, 3, true});
  const TF b = pmsa(twice, p, {2, 3, true});
  for (std::int64_t e = 0; e < 8; ++e) EXPECT_NEAR(a.at({0, 0, e}), b.at({0, 0, e}), 1e-6);
}

TEST(Iffn, ShapeClassTokenAndOracle) {
  Rng rng(7);
  auto p = make_encoder<float>(4, 1, 3, {}, rng);
  const TF x = verify::random_tensor<float>({2, 7, 4}, rng);
  const TF y = iffn(x, {2, 3}, p, Mode::kEval);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(slice(y, 1, 0, 1).to_vector(), slice(x, 1, 0, 1).to_vector());
  const auto ref = oracle::iffn(verify::as_doubles(x), 2, 2, 3, 4, verify::as_doubles(p.dw_row),
                                verify::as_doubles(p.dw_row_bias), verify::as_doubles(p.dw_col),
                                verify::as_doubles(p.dw_col_bias), 3, verify::as_doubles(p.bn_ffn.gamma),
                                verify::as_doubles(p.bn_ffn.beta), verify::as_doubles(p.bn_ffn.running_mean),
                                verify::as_doubles(p.bn_ffn.running_var), false);
  const auto got = verify::as_doubles(slice(y, 1, 1, 6));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-5);
}

TEST(Iffn, GridMismatch) {
  Rng rng(8);
  auto p = make_encoder<float>(4, 1, 3, {}, rng);
  EXPECT_THROW(iffn(TF({1, 7, 4}), {2, 2}, p, Mode::kEval), ContractError);
}

TEST(Iffn, RectangularGridAndUnfactorized) {
  Rng rng(9);
  auto p = make_encoder<float>(4, 1, 3, {false, false}, rng);
  EXPECT_EQ(p.dw_row.shape(), (Shape{4, 1, 3, 3}));
  EXPECT_FALSE(p.dw_col.defined());
  EXPECT_FALSE(p.bn_ffn.gamma.defined());
  const TF x = verify::random_tensor<float>({1, 11, 4}, rng);
  const TF y = iffn(x, {2, 5}, p, Mode::kTrain);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(slice(y, 1, 0, 1).to_vector(), slice(x, 1, 0, 1).to_vector());
}

TEST(Encode, ZeroBranchesAreIdentity) {
  Rng rng(10);
  auto p = make_encoder<float>(8, 2, 3, {}, rng);
  for (auto* t : {&p.qkv, &p.attn_out.weight, &p.dw_row, &p.dw_col}) zero(*t);
  const TF x = verify::random_tensor<float>({2, 9, 8}, rng);
  const auto out = encode<float>({x, {2, 4}}, p, {2, 4, true}, Mode::kEval);
  EXPECT_EQ(out.tokens.to_vector(), x.to_vector());
  EXPECT_EQ(out.grid, (Grid{2, 4}));
}

TEST(Encode, ComposesWithoutHiddenState) {
  Rng rng(11);
  auto p1 = random_encoder(8, 2, rng);
  auto p2 = random_encoder(8, 2, rng);
  const TF x = verify::random_tensor<float>({2, 5, 8}, rng);
  const AttentionSpec spec{2, 2, true};
  auto twice = [&] { return encode(encode<float>({x, {2, 2}}, p1, spec, Mode::kEval), p2, spec, Mode::kEval); };
  const auto a = twice().tokens.to_vector();
  const auto mid = encode<float>({x, {2, 2}}, p1, spec, Mode::kEval);
  const auto b = encode(mid, p2, spec, Mode::kEval).tokens.to_vector();
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, twice().tokens.to_vector());
}

TEST(Encode, HeadsMustDivideDim) {
  Rng rng(12);
  EXPECT_THROW(make_encoder<float>(10, 3, 3, {}, rng), ConfigError);
}

TEST(EncoderSuites, OracleAndInvariantChecksPass) {
  for (const auto& suite : {verify::attention_oracle_checks(3), verify::encoder_invariant_checks(3)}) {
    for (const auto& c : suite) EXPECT_TRUE(c.pass) << c.name << " err " << c.error;
  }
}
