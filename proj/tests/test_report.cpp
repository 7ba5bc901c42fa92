#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "mlcaps/report.hpp"
#include "support.hpp"
#include "synthetic.hpp"

using namespace mlcaps;
using namespace mlcaps::testing;

namespace {

RunMetrics fake_run(std::size_t epochs, std::size_t levels) {
  RunMetrics run;
  for (std::size_t e = 1; e <= epochs; ++e) {
    EpochMetrics em;
    em.epoch = e;
    em.lr = lr_at(e - 1, TrainSchedule{});
    for (auto* s : {&em.train, &em.test}) {
      for (std::size_t l = 0; l < levels; ++l) {
        s->accuracy.push_back(0.5 + 0.03 * double(e) - 0.01 * double(l));
        s->margin_loss.push_back(0.1 / double(e));
      }
      s->recon_loss = 0.05;
      s->total_loss = 0.2;
    }
    em.lambdas.assign(levels, 1.0 / double(levels));
    run.epochs.push_back(em);
  }
  return run;
}

std::vector<std::string> attribute_values(const std::string& svg, const std::string& pattern) {
  std::vector<std::string> out;
  std::regex re(pattern);
  for (std::sregex_iterator it(svg.begin(), svg.end(), re), end; it != end; ++it) out.push_back((*it)[1]);
  return out;
}

}  // namespace

TEST(MetricsCsv, WriteThenReadRecoversEveryRow) {
  auto tree = two_level_tree(2, 4);
  auto run = fake_run(4, 2);
  std::stringstream csv;
  write_metrics_csv(csv, tree, run);
  auto rows = read_metrics_csv(csv);
  ASSERT_EQ(rows.size(), 4u * 2 * 2);
  EXPECT_EQ(rows[0].epoch, 1u);
  EXPECT_EQ(rows[0].level, "coarse");
  EXPECT_EQ(rows[0].split, "train");
  EXPECT_EQ(rows.back().split, "test");
  EXPECT_NEAR(rows.back().accuracy, run.epochs.back().test.accuracy[1], 1e-6);
  EXPECT_NEAR(rows[2].lr, 0.001, 1e-12);
  EXPECT_NEAR(rows[4].lr, 0.000995, 1e-12);
}

TEST(MetricsCsv, MalformedInputIsAFormatError) {
  auto read = [](const std::string& s) {
    std::istringstream in(s);
    return read_metrics_csv(in);
  };
  const std::string head = std::string(kMetricsHeader) + "\n";
  EXPECT_THROW(read(""), format_error);
  EXPECT_THROW(read(head), format_error);
  EXPECT_THROW(read("epoch,acc\n1,0.5\n"), format_error);
  EXPECT_THROW(read(head + "1,fine,test,0.5\n"), format_error);
  EXPECT_THROW(read(head + "1,fine,val,0.5,0,0,0,0.001,1\n"), format_error);
  EXPECT_THROW(read(head + "x,fine,test,0.5,0,0,0,0.001,1\n"), format_error);
  EXPECT_NO_THROW(read(head + "1,fine,test,0.5,0,0,0,0.001,1\n\n"));
  EXPECT_THROW(load_metrics_csv("/nonexistent/metrics.csv"), missing_data_error);
}

TEST(Plot, TwoLevelsOverFifteenEpochsGiveTwoCurvesOfFifteenPoints) {
  auto tree = two_level_tree(2, 4);
  auto run = fake_run(15, 2);
  std::stringstream csv;
  write_metrics_csv(csv, tree, run);
  auto curves = accuracy_curves(read_metrics_csv(csv));
  ASSERT_EQ(curves.size(), 2u);
  EXPECT_EQ(curves[0].level, "coarse");
  EXPECT_EQ(curves[1].level, "fine");
  for (const auto& c : curves) EXPECT_EQ(c.values.size(), 15u);

  std::ostringstream svg;
  write_accuracy_svg(svg, curves, "MNIST");
  const std::string s = svg.str();
  const auto levels = attribute_values(s, "class=\"curve\" data-level=\"([^\"]+)\"");
  EXPECT_EQ(levels, (std::vector<std::string>{"coarse", "fine"}));
  const auto values = attribute_values(s, "data-values=\"([^\"]+)\"");
  ASSERT_EQ(values.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    std::vector<double> parsed;
    std::stringstream ss(values[l]);
    std::string tok;
    while (std::getline(ss, tok, ',')) parsed.push_back(std::stod(tok));
    ASSERT_EQ(parsed.size(), 15u);
    EXPECT_NEAR(parsed.back(), run.epochs.back().test.accuracy[l], 1e-6);
    EXPECT_NEAR(parsed.front(), run.epochs.front().test.accuracy[l], 1e-6);
  }
  EXPECT_EQ(attribute_values(s, "<circle class=\"point\" data-level=\"(coarse)\"").size(), 15u);
  EXPECT_EQ(attribute_values(s, "<circle class=\"point\" data-level=\"(fine)\"").size(), 15u);
  EXPECT_EQ(s.rfind("</svg>\n"), s.size() - 7);
}

TEST(Plot, TrainSplitCurvesAndMissingSplit) {
  auto tree = two_level_tree(2, 4);
  std::stringstream csv;
  write_metrics_csv(csv, tree, fake_run(3, 2));
  auto rows = read_metrics_csv(csv);
  EXPECT_EQ(accuracy_curves(rows, "train").size(), 2u);
  EXPECT_THROW(accuracy_curves(rows, "val"), format_error);
}

TEST(ImageGrid, WritesPgmAndPpmWithExpectedGeometry) {
  auto dir = temp_dir("grid");
  std::vector<float> top(3 * 4 * 5, 1.0f), bottom(3 * 4 * 5, 0.0f);
  write_image_grid(dir / "g.pgm", top, bottom, 3, 1, 4, 5);
  std::ifstream in(dir / "g.pgm", std::ios::binary);
  std::string magic;
  std::size_t w, h, maxv;
  in >> magic >> w >> h >> maxv;
  in.get();
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(w, 3u * (5 + 2) + 2);
  EXPECT_EQ(h, 2u * (4 + 2) + 2);
  EXPECT_EQ(maxv, 255u);
  std::vector<unsigned char> pix{std::istreambuf_iterator<char>(in), {}};
  ASSERT_EQ(pix.size(), w * h);
  EXPECT_EQ(pix[2 * w + 2], 255);              // first input pixel
  EXPECT_EQ(pix[(2 + 4 + 2) * w + 2], 0);      // first reconstruction pixel
  EXPECT_EQ(pix[0], 255);                      // padding

  std::vector<float> rgb(2 * 3 * 2 * 2, 0.5f);
  write_image_grid(dir / "g.ppm", rgb, rgb, 2, 3, 2, 2, 1);
  EXPECT_EQ(std::filesystem::file_size(dir / "g.ppm"), std::string("P6\n7 7\n255\n").size() + 7 * 7 * 3);
  EXPECT_THROW(write_image_grid(dir / "bad.pgm", top, bottom, 2, 1, 4, 5), dimension_error);
  EXPECT_THROW(write_image_grid(dir / "bad.pgm", rgb, rgb, 2, 2, 2, 3), dimension_error);
}

TEST(AccuracyTable, OneColumnPerLevel) {
  auto tree = two_level_tree(2, 4);
  SplitMetrics m;
  m.accuracy = {0.9965, 0.995};
  m.consistency = 0.99;
  const auto t = accuracy_table(tree, m);
  EXPECT_NE(t.find("coarse"), std::string::npos);
  EXPECT_NE(t.find("99.65%"), std::string::npos);
  EXPECT_NE(t.find("99.50%"), std::string::npos);
  EXPECT_NE(t.find("Consistency 0.9900"), std::string::npos);
}
