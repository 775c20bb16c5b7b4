#include "doctest.h"

#include <filesystem>

#include "sit/checkpoint.hpp"
#include "sit/dataset.hpp"
#include "sit/io.hpp"
#include "sit/plan.hpp"
#include "sit/vit.hpp"

using namespace sit;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "sit_test_io";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("dataset: header arithmetic and round trip") {
  SynthSpec spec;
  spec.classes = 4;
  spec.samples_per_class = 3;
  spec.size = 8;
  spec.seed = 7;
  const Dataset ds = gen_synth(spec);
  CHECK(ds.size() == 12);
  CHECK(ds.file_bytes() == 19 + 12 * (64 + 2));
  const auto bytes = encode_dataset(ds);
  CHECK(bytes.size() == ds.file_bytes());
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "SITD");
  for (std::size_t i = 0; i < ds.size(); ++i) CHECK(ds.label(i) == i % 4);

  const auto path = scratch("ds.bin");
  write_dataset(path, ds);
  const Dataset back = read_dataset(path);
  CHECK(back.pixels == ds.pixels);
  CHECK(back.labels == ds.labels);
  CHECK(back.classes == 4);

  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_dataset(truncated), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_dataset(bad_magic), FormatError);
}

TEST_CASE("dataset: same seed gives identical bytes, different seed differs") {
  SynthSpec spec;
  spec.samples_per_class = 5;
  spec.seed = 11;
  CHECK(encode_dataset(gen_synth(spec)) == encode_dataset(gen_synth(spec)));
  SynthSpec other = spec;
  other.seed = 12;
  CHECK(encode_dataset(gen_synth(spec)) != encode_dataset(gen_synth(other)));
}

TEST_CASE("checkpoint: round trip preserves tensors, config and flags") {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.heads = 2;
  c.depth = 4;
  c.stages = {1, 1, 1, 1};
  c.keep_ratio = 0.5;
  Rng rng(1);
  VisionTransformer<float> m(c, rng);
  auto params = m.parameters();
  params.push_back({"recal.1.expand", Tensorf::parameter(rng.normal_matrix<float>(4, 3)), true});
  const auto ckpt = make_checkpoint(c, params, {{"epoch", 3}});
  const auto path = scratch("model.sitc");
  save_checkpoint(path, ckpt);
  const auto back = load_checkpoint(path);
  CHECK(back.config == c);
  CHECK(back.metadata["epoch"] == 3);
  REQUIRE(back.tensors.size() == params.size());
  CHECK(back.find("recal.1.expand")->training_only);
  CHECK_FALSE(back.find("pos_embed")->training_only);

  Rng rng2(2);
  VisionTransformer<float> fresh(c, rng2);
  auto fp = fresh.parameters();
  load_parameters(back, fp);
  for (std::size_t i = 0; i < fp.size(); ++i) CHECK(fp[i].tensor.value() == params[i].tensor.value());

  VisionTransformer<double> wide(c, rng2);
  auto dp = wide.parameters();
  load_parameters(back, dp);
  CHECK(dp[0].tensor.value().cast<float>() == params[0].tensor.value());
}

TEST_CASE("checkpoint: corruption and shape mismatches are detected") {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.heads = 2;
  c.depth = 2;
  c.stages = {2, 0, 0, 0};
  Rng rng(3);
  VisionTransformer<float> m(c, rng);
  auto bytes = encode_checkpoint(make_checkpoint(c, m.parameters()));
  auto flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x40;
  CHECK_THROWS_AS(decode_checkpoint(flipped), FormatError);
  auto cut = bytes;
  cut.resize(cut.size() - 10);
  CHECK_THROWS_AS(decode_checkpoint(cut), FormatError);

  ModelConfig wide = c;
  wide.embed_dim = 16;
  VisionTransformer<float> other(wide, rng);
  auto op = other.parameters();
  CHECK_THROWS_AS(load_parameters(decode_checkpoint(bytes), op), ShapeError);
}

TEST_CASE("config JSON rejects unknown fields and round-trips") {
  ModelConfig c;
  c.stages = {2, 2, 2, 2};
  c.keep_ratio = 0.5;
  nlohmann::json j = c;
  CHECK(j.get<ModelConfig>() == c);
  j["embed_dimm"] = 3;
  try {
    (void)j.get<ModelConfig>();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("embed_dimm") != std::string::npos);
  }
  nlohmann::json plan = TrainPlan{};
  plan["lr"] = 1;
  CHECK_THROWS_AS((void)plan.get<TrainPlan>(), ConfigError);
  nlohmann::json w = DistillWeights{};
  CHECK(w.get<DistillWeights>().lambda_token == 2.0);
}

TEST_CASE("crc32 and atomic writes") {
  const std::string s = "123456789";
  CHECK(crc32_of(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())) == 0xCBF43926u);
  const auto path = scratch("nested/dir/file.txt");
  write_text_atomic(path, "hello");
  const auto bytes = read_file(path);
  CHECK(std::string(bytes.begin(), bytes.end()) == "hello");
  CHECK_FALSE(fs::exists(path.string() + ".tmp"));
  CHECK_THROWS_AS(read_file(scratch("missing.bin")), FormatError);
}
