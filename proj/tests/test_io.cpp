#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"

using namespace cpconv;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("cpconv_test_io_" + name);
  fs::remove_all(p);
  return p;
}

std::string bytes_of(const DenseTensor<double>& t) {
  std::ostringstream os(std::ios::binary);
  write_cpt(os, t);
  return os.str();
}

}  // namespace

TEST(Cpt1, ByteLayout) {
  const DenseTensor<double> t({1, 2}, {1.0, -2.0});
  const std::string b = bytes_of(t);
  ASSERT_EQ(b.size(), 4u + 1 + 1 + 2 * 8 + 2 * 8);
  EXPECT_EQ(b.substr(0, 4), "CPT1");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 1);  // f64
  EXPECT_EQ(static_cast<unsigned char>(b[5]), 2);  // ndim
  // dims little-endian u64
  EXPECT_EQ(static_cast<unsigned char>(b[6]), 1);
  for (int i = 7; i < 14; ++i) EXPECT_EQ(b[i], 0);
  EXPECT_EQ(static_cast<unsigned char>(b[14]), 2);
  // 1.0 = 0x3FF0000000000000, stored little-endian
  EXPECT_EQ(static_cast<unsigned char>(b[22 + 7]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(b[22 + 6]), 0xF0);
  // -2.0 = 0xC000000000000000
  EXPECT_EQ(static_cast<unsigned char>(b[30 + 7]), 0xC0);
}

TEST(Cpt1, Float32Code) {
  std::ostringstream os(std::ios::binary);
  write_cpt(os, DenseTensor<float>({3}, {1, 2, 3}));
  const std::string b = os.str();
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 0);
  EXPECT_EQ(b.size(), 6u + 8 + 3 * 4);
}

TEST(Cpt1, BitExactRoundTrip) {
  std::mt19937_64 rng(2);
  auto t = oracle::randn({2, 3, 4}, rng);
  t[0] = -0.0;
  t[1] = std::numeric_limits<double>::denorm_min();
  t[2] = std::numeric_limits<double>::max();
  std::istringstream is(bytes_of(t), std::ios::binary);
  const auto back = read_cpt<double>(is);
  ASSERT_EQ(back.shape(), t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(back[i]), std::bit_cast<std::uint64_t>(t[i]));

  const auto tf = t.cast<float>();
  std::ostringstream os(std::ios::binary);
  write_cpt(os, tf);
  std::istringstream isf(os.str(), std::ios::binary);
  const auto any = read_cpt_any(isf);
  ASSERT_TRUE(std::holds_alternative<DenseTensor<float>>(any));
  EXPECT_EQ(std::get<DenseTensor<float>>(any), tf);
}

TEST(Cpt1, MalformedInputs) {
  const std::string good = bytes_of(DenseTensor<double>({2}, {1, 2}));
  auto parse = [](std::string s) {
    std::istringstream is(s, std::ios::binary);
    return read_cpt<double>(is);
  };
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse(bad_magic), FormatError);
  std::string bad_dtype = good;
  bad_dtype[4] = 7;
  EXPECT_THROW(parse(bad_dtype), FormatError);
  EXPECT_THROW(parse(good.substr(0, good.size() - 1)), FormatError);
  EXPECT_THROW(parse(good.substr(0, 5)), FormatError);
  EXPECT_THROW(load_cpt<double>(scratch("missing") / "nope.cpt"), FormatError);
}

TEST(NetworkManifest, RoundTripIsBitIdentical) {
  const auto dir = scratch("net");
  ToyNetConfig cfg;
  cfg.seed = 9;
  auto net = make_toy_net<double>(cfg);
  net.layer("conv1").conv().frozen = true;
  save_network(dir, net);
  EXPECT_TRUE(fs::exists(dir / "network.json"));
  EXPECT_TRUE(fs::exists(dir / "conv1.kernel.cpt"));
  const auto back = load_network<double>(dir);
  EXPECT_EQ(back.input_shape, net.input_shape);
  ASSERT_EQ(back.layers.size(), net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    EXPECT_EQ(back.layers[i].name, net.layers[i].name);
    EXPECT_EQ(back.layers[i].body.index(), net.layers[i].body.index());
  }
  EXPECT_EQ(back.layer("conv1").conv(), net.layer("conv1").conv());
  EXPECT_EQ(back.layer("conv2").conv(), net.layer("conv2").conv());
  // manifest path accepted directly too
  EXPECT_EQ(load_network<double>(dir / "network.json").layer("conv2").conv(), net.layer("conv2").conv());
}

TEST(NetworkManifest, RewrittenNetRoundTrip) {
  const auto dir = scratch("net_rw");
  std::mt19937_64 rng(4);
  const auto net = make_toy_net<double>({});
  const auto k = rewritable_kernel(net, "conv1");
  const auto stack = random_conv_stack<double>(k.d(), k.in_channels(), k.out_channels(), 3, k.bias, Padding::valid, rng);
  const auto rw = splice_stack(net, "conv1", stack);
  save_network(dir, rw);
  const auto back = load_network<double>(dir);
  ASSERT_EQ(back.layers.size(), rw.layers.size());
  for (const char* suffix : kStackSuffixes) {
    const auto& a = back.layer(std::string("conv1") + suffix).conv();
    EXPECT_EQ(a, rw.layer(std::string("conv1") + suffix).conv());
    EXPECT_TRUE(a.inserted);
  }
}

TEST(NetworkManifest, CorruptManifest) {
  const auto dir = scratch("net_bad");
  save_network(dir, make_toy_net<double>({}));
  {
    std::ofstream os(dir / "network.json", std::ios::trunc);
    os << "{\"format\": \"something-else\", \"input_shape\": [1,24,24], \"layers\": []}";
  }
  EXPECT_THROW(load_network<double>(dir), FormatError);
  {
    std::ofstream os(dir / "network.json", std::ios::trunc);
    os << "{ not json";
  }
  EXPECT_THROW(load_network<double>(dir), FormatError);
}

TEST(CpManifest, RoundTripIsBitIdentical) {
  const auto dir = scratch("cp");
  std::mt19937_64 rng(8);
  CPDecomposition<double> d;
  d.factors = oracle::randn_factors({3, 4, 5}, 2, rng);
  save_decomposition(dir, d, {{"method", "nls"}, {"rel_error", "0.5"}});
  std::map<std::string, std::string> kv;
  const auto back = load_decomposition<double>(dir, &kv);
  EXPECT_EQ(back, d);
  EXPECT_EQ(kv.at("rank"), "2");
  EXPECT_EQ(kv.at("modes"), "3 4 5");
  EXPECT_EQ(kv.at("dtype"), "f64");
  EXPECT_EQ(kv.at("method"), "nls");
}

TEST(CpManifest, WeightsAbsorbedOnSave) {
  const auto dir = scratch("cp_w");
  std::mt19937_64 rng(8);
  CPDecomposition<double> d;
  d.factors = oracle::randn_factors({3, 4}, 2, rng);
  d.weights = {2.0, -3.0};
  save_decomposition(dir, d);
  const auto back = load_decomposition<double>(dir);
  EXPECT_TRUE(back.weights.empty());
  EXPECT_LT(oracle::max_abs_diff(reconstruct(back), reconstruct(d)), 1e-14);
}

TEST(CpManifest, ShapeMismatchRejected) {
  const auto dir = scratch("cp_bad");
  std::mt19937_64 rng(8);
  CPDecomposition<double> d;
  d.factors = oracle::randn_factors({3, 4}, 2, rng);
  save_decomposition(dir, d);
  save_cpt(dir / "factor1.cpt", oracle::randn({4, 3}, rng));
  EXPECT_THROW(load_decomposition<double>(dir), FormatError);
}

TEST(Dataset, RoundTripAndCsvHeader) {
  const auto dir = scratch("ds");
  SyntheticConfig cfg;
  cfg.num_classes = 3;
  cfg.per_class = 4;
  cfg.size = 8;
  const auto ds = gen_synthetic<double>(cfg);
  save_dataset(dir, ds);
  std::ifstream is(dir / "labels.csv");
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "index,label");
  const auto back = load_dataset<double>(dir);
  EXPECT_EQ(back.images, ds.images);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.num_classes, ds.num_classes);
}
