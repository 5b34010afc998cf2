#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "miles/ablation.hpp"
#include "test_util.hpp"

using namespace miles;
using miles::testing::tiny_run_config;
using miles::testing::tiny_train_data;

namespace {

EvalSet tiny_eval_set(const RunConfig& c) {
  EvalSet e;
  e.clips = generate_split(c.data, 2);
  for (std::size_t k = 0; k < c.data.classes; ++k) e.class_captions.push_back(class_caption(k));
  return e;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(AblationVariants, CountsPerAxis) {
  const RunConfig c;
  EXPECT_EQ(ablation_variants(AblationAxis::masking, c).size(), 14u);
  EXPECT_EQ(ablation_variants(AblationAxis::update, c).size(), 5u);
  EXPECT_EQ(ablation_variants(AblationAxis::targets, c).size(), 3u);
  EXPECT_EQ(ablation_variants(AblationAxis::finetune_mvm, c).size(), 2u);
  EXPECT_EQ(parse_ablation_axis("masking"), AblationAxis::masking);
  EXPECT_THROW(parse_ablation_axis("depth"), ConfigError);
}

TEST(AblationVariants, EveryVariantYieldsAValidConfig) {
  const RunConfig c;
  for (auto axis : {AblationAxis::targets, AblationAxis::update, AblationAxis::masking, AblationAxis::finetune_mvm}) {
    std::set<std::string> names;
    for (const auto& v : ablation_variants(axis, c)) {
      EXPECT_TRUE(names.insert(v.name).second) << v.name;
      nlohmann::json doc = nlohmann::json(c);
      for (const auto& o : v.overrides) apply_override(doc, o);
      EXPECT_NO_THROW(validate(run_config_from_json(doc))) << v.name;
    }
  }
}

TEST(AblationVariants, MaskingCellsChangeOnlyTheLastStage) {
  const RunConfig c;
  const auto vs = ablation_variants(AblationAxis::masking, c);
  std::set<std::pair<std::string, double>> cells;
  for (const auto& v : vs) {
    nlohmann::json doc = nlohmann::json(c);
    for (const auto& o : v.overrides) apply_override(doc, o);
    const RunConfig r = run_config_from_json(doc);
    EXPECT_EQ(r.train.stages[0].mask_strategy, c.train.stages[0].mask_strategy);
    EXPECT_EQ(r.train.stages[0].mask_ratio, c.train.stages[0].mask_ratio);
    EXPECT_TRUE(r.train.use_mvm);
    cells.insert({r.train.stages[1].mask_strategy, r.train.stages[1].mask_ratio});
  }
  EXPECT_EQ(cells.size(), 14u);
  EXPECT_TRUE(cells.count({"frame_wise", 0.25}));
  EXPECT_TRUE(cells.count({"block_tube", 0.85}));
}

TEST(AblationVariants, FinetuneConfigKeepsLastStage) {
  const RunConfig c;
  const RunConfig f = finetune_config(c);
  ASSERT_EQ(f.train.stages.size(), 1u);
  EXPECT_EQ(f.train.stages[0].frames, c.train.stages.back().frames);
  EXPECT_EQ(f.train.warmup_epochs, 0u);
}

TEST(AblationRun, IdenticalVariantsGiveIdenticalRows) {
  const RunConfig c = tiny_run_config();
  const TrainData train = tiny_train_data(c);
  const EvalSet eval = tiny_eval_set(c);
  const std::vector<AblationVariant> vs = {{"a", {{"X", "a"}}, {"train.use_mvm=true"}, std::nullopt},
                                           {"b", {{"X", "b"}}, {"train.use_mvm=true"}, std::nullopt}};
  std::size_t cells = 0;
  AblationOptions opt;
  opt.on_cell = [&](const AblationVariant&, const CellRun&) { ++cells; };
  const AblationTable t = ablation_run("test", nlohmann::json(c), vs, {0, 1}, train, eval, opt);
  EXPECT_EQ(cells, 4u);
  ASSERT_EQ(t.rows.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    ASSERT_TRUE(t.rows[0].runs[i].ok) << t.rows[0].runs[i].error;
    EXPECT_EQ(metric_values(t.rows[0].runs[i].metrics), metric_values(t.rows[1].runs[i].metrics));
    EXPECT_EQ(t.rows[0].runs[i].seed, i);
  }
  const auto a = aggregate(t.rows[0], 0);
  ASSERT_TRUE(a.has_value());
  EXPECT_LE(a->min, a->mean);
  EXPECT_LE(a->mean, a->max);
}

TEST(AblationRun, FailedCellIsRecordedAndOthersContinue) {
  const RunConfig c = tiny_run_config();
  const TrainData train = tiny_train_data(c);
  const EvalSet eval = tiny_eval_set(c);
  const std::vector<AblationVariant> vs = {{"bad", {{"X", "bad"}}, {"train.tau=0"}, std::nullopt},
                                           {"good", {{"X", "good"}}, {}, std::nullopt}};
  const AblationTable t = ablation_run("test", nlohmann::json(c), vs, {0}, train, eval);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_FALSE(t.rows[0].runs[0].ok);
  EXPECT_FALSE(t.rows[0].runs[0].error.empty());
  EXPECT_FALSE(aggregate(t.rows[0], 0).has_value());
  EXPECT_TRUE(t.rows[1].runs[0].ok);

  const std::string csv = ablation_csv(t);
  EXPECT_EQ(count_lines(csv), 3u);
  EXPECT_EQ(csv.substr(0, csv.find(',')), "X");
  std::istringstream is(csv);
  std::string header, bad, good;
  std::getline(is, header);
  std::getline(is, bad);
  std::getline(is, good);
  const auto commas = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  EXPECT_EQ(commas(bad), commas(header));
  EXPECT_EQ(commas(good), commas(header));
  EXPECT_NE(bad.find("bad,1,1"), std::string::npos);
  EXPECT_NE(good.find("good,1,0"), std::string::npos);

  const auto j = ablation_json(t);
  EXPECT_EQ(j.at("axis"), "test");
  EXPECT_FALSE(j.at("rows")[0].at("runs")[0].at("ok").get<bool>());
  EXPECT_TRUE(j.at("rows")[0].at("runs")[0].contains("error"));
  EXPECT_FALSE(j.at("rows")[0].contains("summary"));
  EXPECT_TRUE(j.at("rows")[1].at("summary").contains("R@1"));

  const std::string text = ablation_text(t);
  EXPECT_EQ(count_lines(text), 3u);
  EXPECT_NE(text.find("0/1"), std::string::npos);
  EXPECT_NE(text.find("1/1"), std::string::npos);
}

TEST(AblationRun, FinetuneVariantsShareThePretrainedModel) {
  RunConfig c = tiny_run_config();
  const TrainData train = tiny_train_data(c);
  const EvalSet eval = tiny_eval_set(c);
  const auto vs = ablation_variants(AblationAxis::finetune_mvm, c);
  const AblationTable t = ablation_run("finetune_mvm", nlohmann::json(c), vs, {0}, train, eval);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_TRUE(t.rows[0].runs[0].ok) << t.rows[0].runs[0].error;
  EXPECT_TRUE(t.rows[1].runs[0].ok) << t.rows[1].runs[0].error;
}

TEST(AblationRun, Preconditions) {
  const RunConfig c = tiny_run_config();
  const TrainData train = tiny_train_data(c);
  const EvalSet eval = tiny_eval_set(c);
  const std::vector<AblationVariant> one = {{"a", {}, {}, std::nullopt}};
  EXPECT_THROW(ablation_run("x", nlohmann::json(c), one, {0}, train, eval), ContractError);
  const std::vector<AblationVariant> two = {{"a", {}, {}, std::nullopt}, {"b", {}, {}, std::nullopt}};
  EXPECT_THROW(ablation_run("x", nlohmann::json(c), two, {}, train, eval), ContractError);
}

TEST(AblationOutput, CsvQuotesFieldsWithCommas) {
  AblationTable t;
  t.axis = "x";
  t.label_columns = {"Name"};
  AblationRow row{{"v", {{"Name", "a,\"b\""}}, {}, std::nullopt}, {}};
  t.rows.push_back(row);
  const std::string csv = ablation_csv(t);
  EXPECT_NE(csv.find("\"a,\"\"b\"\"\",v,0,0"), std::string::npos) << csv;
}
