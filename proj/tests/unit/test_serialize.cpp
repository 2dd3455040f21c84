#include <filesystem>

#include <gtest/gtest.h>
#include "json.hpp"

#include "helpers.hpp"
#include "mshift/error.hpp"
#include "mshift/serialize.hpp"

namespace mshift {
namespace {

using nlohmann::json;

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mshift_test_" + name);
}

DaNet random_net(std::uint64_t seed) {
  const SyntheticSpec spec = test::small_spec();
  DaNet net(test::small_model(spec, seed));
  test::jitter_biases(net, seed + 1);
  return net;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const DaNet net = random_net(3);
  const auto path = temp_file("ckpt.json");
  save_checkpoint(net, path, R"({"label":"x"})");
  std::string echo;
  const DaNet back = load_checkpoint(path, &echo);
  EXPECT_EQ(json::parse(echo), json::parse(R"({"label":"x"})"));
  EXPECT_EQ(back.config().encoder_widths, net.config().encoder_widths);
  EXPECT_EQ(back.config().dropout_rate, net.config().dropout_rate);
  ASSERT_EQ(back.params().size(), net.params().size());
  for (const ParamTensor* p : net.params()) EXPECT_TRUE(back.param(p->id).value == p->value) << p->id;
  std::filesystem::remove(path);
}

TEST(Checkpoint, ShapeMismatchNamesTheTensor) {
  const auto path = temp_file("ckpt_bad.json");
  save_checkpoint(random_net(4), path);
  json j = json::parse(read_text(path));
  j["params"]["branch1.adaptor.W"]["shape"] = json::array({2, 2});
  write_text(path, j.dump());
  try {
    load_checkpoint(path);
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("branch1.adaptor.W"), std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, MissingTensorAndGarbageAreRejected) {
  const auto path = temp_file("ckpt_missing.json");
  save_checkpoint(random_net(5), path);
  json j = json::parse(read_text(path));
  j["params"].erase("encoder.0.b");
  write_text(path, j.dump());
  EXPECT_THROW(load_checkpoint(path), SchemaError);
  write_text(path, "{not json");
  EXPECT_THROW(load_checkpoint(path), ParseError);
  write_text(path, R"({"format":"something-else"})");
  EXPECT_THROW(load_checkpoint(path), SchemaError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(Checkpoint, ModelConfigJsonRoundTrip) {
  ModelConfig mc = test::small_model(test::small_spec(), 42);
  mc.activation = Activation::tanh;
  const ModelConfig back = model_config_from_json(model_config_json(mc));
  EXPECT_EQ(back.input_dim, mc.input_dim);
  EXPECT_EQ(back.encoder_widths, mc.encoder_widths);
  EXPECT_EQ(back.adaptor_width, mc.adaptor_width);
  EXPECT_EQ(back.activation, Activation::tanh);
  EXPECT_EQ(back.seed, 42u);
}

TEST(TrainLogJson, OmitsAbsentTerms) {
  TrainLog log;
  EpochRecord warm;
  warm.phase = "warmup";
  warm.ce = 1.5;
  EpochRecord alt;
  alt.epoch = 1;
  alt.phase = "alternate";
  alt.fcd = 0.3;
  log.epochs = {warm, alt};
  const json j = json::parse(trainlog_json(log));
  EXPECT_EQ(j.at("format"), "mshift-trainlog");
  ASSERT_EQ(j.at("epochs").size(), 2u);
  EXPECT_FALSE(j["epochs"][0].contains("fcd"));
  EXPECT_FALSE(j["epochs"][0].contains("cpa"));
  EXPECT_EQ(j["epochs"][1].at("fcd").get<double>(), 0.3);
  EXPECT_FALSE(j["epochs"][1].contains("cpa"));
  EXPECT_EQ(j["epochs"][0].at("ce").get<double>(), 1.5);
}

TEST(EvalReportJson, RoundTripsSummaryFields) {
  EvalReport r;
  r.target_accuracy = 0.8125;
  r.target_macro_f1 = 0.75;
  r.branch_confusion = Tensor2::Identity(2, 2);
  r.classwise_mmd = Tensor2::Constant(2, 2, std::nan(""));
  const EvalSummary s = parse_evalreport(evalreport_json(r, "full", 7));
  EXPECT_EQ(s.label, "full");
  EXPECT_EQ(s.seed, 7u);
  EXPECT_EQ(s.target_accuracy, 0.8125);
  EXPECT_EQ(s.target_macro_f1, 0.75);
  EXPECT_EQ(s.confusion_gap, 1.0);
  EXPECT_THROW(parse_evalreport("{}"), ParseError);
}

}  // namespace
}  // namespace mshift
