#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "uar/errors.hpp"
#include "uar/data.hpp"
#include "uar/image_io.hpp"

using namespace uar;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("uar_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST(Synthetic, SameSeedGivesByteIdenticalCorpus) {
  data::SyntheticOptions o;
  o.n = 100;
  o.seed = 7;
  const auto a = scratch("det_a"), b = scratch("det_b");
  data::write_corpus(data::generate_synthetic(o), a.string());
  data::write_corpus(data::generate_synthetic(o), b.string());
  std::vector<std::string> names;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.is_regular_file()) names.push_back(fs::relative(e.path(), a).string());
  }
  ASSERT_EQ(names.size(), 101u);
  for (const auto& n : names) {
    // the manifest records its own root, which differs between the two dirs
    if (n == "manifest.json") continue;
    EXPECT_EQ(slurp(a / n), slurp(b / n)) << n;
  }
  EXPECT_EQ(data::load_manifest((a / "manifest.json").string()).records.size(), 100u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Synthetic, DifferentSeedsDiffer) {
  data::SyntheticOptions o;
  o.n = 20;
  const auto a = data::generate_synthetic(o);
  o.seed = 1;
  const auto b = data::generate_synthetic(o);
  EXPECT_NE(a.samples[0].views[0].values, b.samples[0].views[0].values);
}

TEST(Synthetic, NoFindingsMeansAbsentSentencesOnly) {
  const std::vector<bool> none(4, false);
  const std::string r = data::compose_report(none);
  for (int f = 0; f < 4; ++f) EXPECT_NE(r.find(data::default_findings()[static_cast<size_t>(f)].absent), std::string::npos);
  EXPECT_EQ(r.find("seen"), std::string::npos);

  data::SyntheticOptions o;
  o.n = 400;
  const auto c = data::generate_synthetic(o);
  int checked = 0;
  for (const auto& s : c.samples) {
    if (std::find(s.present.begin(), s.present.end(), true) != s.present.end()) continue;
    EXPECT_EQ(s.report, r);
    ++checked;
  }
  EXPECT_GT(checked, 0);
}

TEST(Synthetic, TwoFindingsGiveFourSubsets) {
  data::SyntheticOptions o;
  o.n = 500;
  o.k_findings = 2;
  std::set<std::vector<bool>> subsets;
  for (const auto& s : data::generate_synthetic(o).samples) subsets.insert(s.present);
  EXPECT_EQ(subsets.size(), 4u);
}

TEST(Synthetic, OptionValidation) {
  data::SyntheticOptions o;
  o.n = 5;
  EXPECT_THROW(data::generate_synthetic(o), ConfigError);
  o.n = 10;
  o.k_findings = 0;
  EXPECT_THROW(data::generate_synthetic(o), ConfigError);
  o.k_findings = 9;
  EXPECT_THROW(data::generate_synthetic(o), ConfigError);
}

TEST(Synthetic, ReportsRoundTripThroughGrammar) {
  data::SyntheticOptions o;
  o.n = 200;
  o.k_findings = 8;
  o.seed = 3;
  for (const auto& s : data::generate_synthetic(o).samples) EXPECT_EQ(data::parse_report(s.report, 8), s.present);
  EXPECT_THROW(data::parse_report("the heart is fine.", 1), ParseError);
  EXPECT_THROW(data::parse_report(data::compose_report({true, false}), 3), ParseError);
}

TEST(Synthetic, BlobStaysInsideItsCell) {
  // Rendering with one finding switched on changes pixels only inside that
  // finding's cell, for every finding and both views.
  for (int index = 0; index < 25; ++index) {
    for (int view = 0; view < 2; ++view) {
      const std::vector<bool> none(8, false);
      const ImageTensor base = data::render_view(11, index, view, none);
      for (int f = 0; f < 8; ++f) {
        std::vector<bool> one = none;
        one[static_cast<size_t>(f)] = true;
        const ImageTensor img = data::render_view(11, index, view, one);
        const data::PixelRect c = data::finding_cell(f, view);
        int changed = 0;
        for (int y = 0; y < data::kNativeSize; ++y) {
          for (int x = 0; x < data::kNativeSize; ++x) {
            if (img.at(y, x) == base.at(y, x)) continue;
            ++changed;
            EXPECT_TRUE(y >= c.y0 && y < c.y1 && x >= c.x0 && x < c.x1) << "finding " << f << " at " << y << "," << x;
          }
        }
        EXPECT_GT(changed, 0) << "finding " << f;
      }
    }
  }
}

TEST(Synthetic, RegionsCoverAtLeastFourTokens) {
  for (int f = 0; f < 8; ++f) {
    for (int view = 0; view < 2; ++view) {
      const auto t = data::region_tokens(f, 112, 8, view);
      EXPECT_GE(t.size(), 4u);
      for (int i : t) {
        EXPECT_GE(i, view * 196);
        EXPECT_LT(i, (view + 1) * 196);
      }
    }
  }
  // Cell (0,0) of a 128 image on a 16x16 grid is exactly the top-left 4x4 block.
  const std::vector<int> expect{0, 1, 2, 3, 16, 17, 18, 19, 32, 33, 34, 35, 48, 49, 50, 51};
  EXPECT_EQ(data::region_tokens(0, 128, 8), expect);
  EXPECT_THROW(data::region_tokens(0, 100, 8), ShapeError);
}

TEST(Splits, ExactSeventyTenTwentyAndDeterministic) {
  for (int n : {10, 101, 2000}) {
    const auto s = data::assign_splits(n, 5);
    EXPECT_EQ(s, data::assign_splits(n, 5));
    const auto count = [&](const char* name) { return std::count(s.begin(), s.end(), name); };
    EXPECT_LE(std::abs(count("train") - 0.7 * n), 1.0);
    EXPECT_LE(std::abs(count("val") - 0.1 * n), 1.0);
    EXPECT_EQ(count("train") + count("val") + count("test"), n);
  }
  EXPECT_NE(data::assign_splits(50, 1), data::assign_splits(50, 2));
}

TEST(Manifest, MinimalRecordAndSplitLayout) {
  const auto dir = scratch("manifest");
  io::write_png_gray((dir / "a.png").string(), ImageTensor(8, 8, 1, 0.5));
  {
    std::ofstream(dir / "list.json") << R"([{"id": "r1", "images": ["a.png"], "report": "ok.", "split": "val"}])";
    std::ofstream(dir / "splits.json") << R"({"train": [{"id": 7, "image_path": "a.png", "report": "x"}], "test": []})";
  }
  const auto m = data::load_manifest((dir / "list.json").string());
  ASSERT_EQ(m.records.size(), 1u);
  EXPECT_EQ(m.records[0].split, "val");
  EXPECT_EQ(m.split("val").size(), 1u);
  EXPECT_TRUE(fs::exists(m.image_path(m.records[0].images[0])));

  const auto s = data::load_manifest((dir / "splits.json").string());
  ASSERT_EQ(s.records.size(), 1u);
  EXPECT_EQ(s.records[0].split, "train");
  EXPECT_EQ(s.records[0].id, "7");
  fs::remove_all(dir);
}

TEST(Manifest, Errors) {
  const auto dir = scratch("manifest_err");
  {
    std::ofstream(dir / "bad.json") << "[{\"id\": ";
    std::ofstream(dir / "missing.json") << R"([{"id": "r", "images": ["nope.png"], "report": "", "split": "train"}])";
    std::ofstream(dir / "split.json") << R"([{"id": "r", "images": [], "report": "", "split": "dev"}])";
  }
  EXPECT_THROW(data::load_manifest((dir / "bad.json").string()), ParseError);
  try {
    data::load_manifest((dir / "missing.json").string());
    ADD_FAILURE() << "expected MissingFile";
  } catch (const MissingFile& e) {
    EXPECT_NE(std::string(e.what()).find("nope.png"), std::string::npos);
  }
  EXPECT_THROW(data::load_manifest((dir / "split.json").string()), ParseError);
  EXPECT_THROW(data::load_manifest((dir / "absent.json").string()), MissingFile);
  fs::remove_all(dir);
}

TEST(Manifest, SaveLoadRoundTrip) {
  const auto dir = scratch("manifest_rt");
  data::SyntheticOptions o;
  o.n = 12;
  const auto c = data::generate_synthetic(o);
  data::write_corpus(c, dir.string());
  const auto m = data::load_manifest((dir / "manifest.json").string());
  ASSERT_EQ(m.records.size(), 12u);
  for (size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(m.records[i].report, c.manifest.records[i].report);
    EXPECT_EQ(m.records[i].findings, c.manifest.records[i].findings);
    EXPECT_EQ(io::read_png(m.image_path(m.records[i].images[0])).values, c.samples[i].views[0].values);
  }
  fs::remove_all(dir);
}

TEST(Preprocess, InferenceResizesTo112) {
  const data::PreprocessSpec spec;
  for (int s : {64, 128, 200}) {
    const ImageTensor out = data::preprocess(ImageTensor(s, s + 10, 1, 0.3), spec, data::Mode::kInfer, 0);
    EXPECT_EQ(out.height, 112);
    EXPECT_EQ(out.width, 112);
  }
}

TEST(Preprocess, TrainCropIsSeededAndInRange) {
  const data::PreprocessSpec spec;
  const ImageTensor im = data::render_view(0, 0, 0, {true, true, false, false});
  std::set<int> ys, xs;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    data::CropOffset a, b;
    const ImageTensor out = data::preprocess(im, spec, data::Mode::kTrain, seed, &a);
    data::preprocess(im, spec, data::Mode::kTrain, seed, &b);
    EXPECT_EQ(a.y, b.y);
    EXPECT_EQ(a.x, b.x);
    EXPECT_GE(a.y, 0);
    EXPECT_LE(a.y, 16);
    EXPECT_GE(a.x, 0);
    EXPECT_LE(a.x, 16);
    ys.insert(a.y);
    xs.insert(a.x);
    ASSERT_EQ(out.height, 112);
    // 128 input: the resize is the identity, so the crop is a plain window.
    EXPECT_EQ(out.at(5, 7), im.at(a.y + 5, a.x + 7));
  }
  EXPECT_EQ(ys.size(), 17u);
  EXPECT_EQ(xs.size(), 17u);
}

TEST(Preprocess, BilinearHandValues) {
  ImageTensor im(2, 2, 1);
  im.at(0, 0) = 0.0;
  im.at(0, 1) = 1.0;
  im.at(1, 0) = 0.0;
  im.at(1, 1) = 1.0;
  const ImageTensor up = data::resize_bilinear(im, 4, 4);
  // Half-pixel centers: output column 1 samples source x = 0.25.
  EXPECT_DOUBLE_EQ(up.at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(up.at(0, 1), 0.25);
  EXPECT_DOUBLE_EQ(up.at(0, 2), 0.75);
  EXPECT_DOUBLE_EQ(up.at(3, 3), 1.0);
  const ImageTensor down = data::resize_bilinear(up, 1, 1);
  EXPECT_DOUBLE_EQ(down.at(0, 0), 0.5);
  data::PreprocessSpec bad;
  bad.crop = 200;
  EXPECT_THROW(bad.validate(), ConfigError);
}
