#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "modestruct/pipeline.hpp"

using namespace modestruct;

namespace {

SourceModel small_truth() {
  SourceModel m;
  m.n_max = 15;
  m.modes = {{ModeType::Thermal, 2.0, Occupancy::Conjugated, 0.5, 0.6}, {ModeType::Poissonian, 0.3, Occupancy::SignalOnly}};
  return m;
}

PipelineConfig quick() {
  PipelineConfig c;
  c.selection.fit.optimizer.restarts = 2;
  c.bootstrap_resamples = 10;
  c.seed = 17;
  return c;
}

const ReconstructionReport& small_report() {
  static const ReconstructionReport r = reconstruct(sample_counts(full_jpd(small_truth()), 1000000, 3), quick());
  return r;
}

} // namespace

TEST(Reconstruct, RecoversSmallModel) {
  const ReconstructionReport& r = small_report();
  EXPECT_TRUE(r.complete());
  SourceModel truth = small_truth();
  truth.canonicalize();
  ASSERT_EQ(r.model.modes.size(), truth.modes.size());
  for (std::size_t k = 0; k < truth.modes.size(); ++k) {
    EXPECT_EQ(r.model.modes[k].type, truth.modes[k].type);
    EXPECT_EQ(r.model.modes[k].occupancy, truth.modes[k].occupancy);
    EXPECT_NEAR(r.model.modes[k].mu, truth.modes[k].mu, 0.05 * truth.modes[k].mu);
  }
  EXPECT_NEAR(r.model.modes[0].eta_s, 0.5, 0.025);
  EXPECT_NEAR(r.model.modes[0].eta_i, 0.6, 0.03);
  EXPECT_GT(r.fit.p_value, 0.01);
  ASSERT_FALSE(r.passes.empty());
  EXPECT_EQ(r.passes[0].ranking.size(), 2u);
  EXPECT_GT(r.hillery_lossless.even_sigma, 0.0);
}

TEST(Reconstruct, ReportIsDeterministic) {
  const CountMatrix c = sample_counts(full_jpd(small_truth()), 1000000, 3);
  EXPECT_EQ(report_to_json(reconstruct(c, quick())).dump(2), report_to_json(small_report()).dump(2));
}

TEST(Reconstruct, VacuumGivesEmptyModel) {
  CountMatrix c(5);
  c.n_tot = 1000;
  c(0, 0) = 1000;
  const ReconstructionReport r = reconstruct(c, quick());
  EXPECT_TRUE(r.complete());
  EXPECT_TRUE(r.model.modes.empty());
  EXPECT_EQ(r.hillery_measured.vacuum, 1.0);
}

TEST(Reconstruct, AllOverflowIsPartial) {
  CountMatrix c(3);
  c.n_tot = 50;
  const ReconstructionReport r = reconstruct(c, quick());
  EXPECT_FALSE(r.complete());
  EXPECT_EQ(report_to_json(r)["status"], "partial");
  EXPECT_THROW(reconstruct(CountMatrix(3), quick()), std::invalid_argument);
}

TEST(Reconstruct, WritesRunDirectory) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "modestruct_test_run";
  fs::remove_all(dir);
  CountMatrix c(4);
  c.n_tot = 200;
  c(0, 0) = 200;
  reconstruct(c, quick(), dir.string());
  for (const char* f : {"report.json", "model.json", "rpd.csv", "structure_candidates.csv", "assignments.csv", "jpd.csv",
                        "model.csv"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(read_model_json((dir / "model.json").string()).modes.size(), 0u);
  fs::remove_all(dir);
}

TEST(PipelineConfigJson, RoundTripAndDefaults) {
  PipelineConfig c = quick();
  c.selection.prune_threshold = 0.02;
  c.selection.candidate_types = {ModeType::Thermal};
  c.selection.fit.weighting = Weighting::ShotNoise;
  const PipelineConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(back).dump(), config_to_json(c).dump());
  const PipelineConfig d = config_from_json(Json::parse("{}"));
  EXPECT_TRUE(d.selection.fit.shared_losses);
  EXPECT_EQ(d.selection.prune_threshold, 0.01);
}

TEST(PipelineConfigJson, StrictFieldErrors) {
  auto field_of = [](const char* text) {
    try {
      config_from_json(Json::parse(text));
    } catch (const ParseError& e) {
      return e.field();
    }
    return std::string("<none>");
  };
  EXPECT_EQ(field_of(R"({"prune_threshold": 1.5})"), "prune_threshold");
  EXPECT_EQ(field_of(R"({"optimizer": {"restarts": 0}})"), "optimizer.restarts");
  EXPECT_EQ(field_of(R"({"optimizer": {"speed": 1}})"), "optimizer.speed");
  EXPECT_EQ(field_of(R"({"candidate_types": ["thermal", "laser"]})"), "candidate_types[1]");
  EXPECT_EQ(field_of(R"({"weighting": "flat"})"), "weighting");
}
