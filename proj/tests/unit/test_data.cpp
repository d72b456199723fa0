#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <set>

#include <opencv2/imgcodecs.hpp>

#include "mtperson/convert.hpp"
#include "mtperson/data.hpp"
#include "mtperson/errors.hpp"
#include "mtperson/metrics.hpp"
#include "support/tempdir.hpp"

using namespace mtp;
using namespace mtp::data;
using nlohmann::json;
using testutil::TempDir;

namespace {

void write_png(const std::filesystem::path& p, int h = 16, int w = 8) {
  std::filesystem::create_directories(p.parent_path());
  cv::imwrite(p.string(), cv::Mat(h, w, CV_8UC3, cv::Scalar(10, 20, 30)));
}

DatasetManifest pk_manifest(const std::vector<int>& per_id) {
  DatasetManifest m;
  m.name = "pk";
  m.tasks.reid = true;
  for (std::size_t id = 0; id < per_id.size(); ++id)
    for (int k = 0; k < per_id[id]; ++k) {
      SampleRecord r;
      r.image = "x.png";
      r.person_id = static_cast<std::int64_t>(id);
      m.records.push_back(r);
    }
  return m;
}

bool pk_holds(const DatasetManifest& m, const Batch& b, int P, int K) {
  std::map<std::int64_t, int> n;
  for (auto i : b.indices) ++n[*m.records[i].person_id];
  if (static_cast<int>(n.size()) != P) return false;
  for (auto& [id, c] : n)
    if (c != K) return false;
  return true;
}

Sample toy_sample() {
  Sample s;
  s.image = cv::Mat(128, 128, CV_8UC3);
  cv::randu(s.image, 0, 255);
  s.joints = JointSet{{{10, 20, true}, {100, 30, true}, {64, 64, false}}, 12.0};
  cv::Mat m(128, 128, CV_8UC1, cv::Scalar(0));
  m(cv::Rect(0, 0, 64, 128)).setTo(1);
  m(cv::Rect(64, 0, 64, 128)).setTo(2);
  m(cv::Rect(40, 40, 10, 10)).setTo(3);
  s.mask = m;
  return s;
}

}  // namespace

TEST(Manifest, MinimalReidRecordLoads) {
  TempDir d;
  write_png(d / "a.png");
  std::ofstream(d / "m.json") << R"({"name":"t","tasks":["reid"],"records":[{"image":"a.png","person_id":3}]})";
  const auto m = load_manifest(d / "m.json");
  EXPECT_TRUE(m.tasks.reid);
  EXPECT_FALSE(m.tasks.pose || m.tasks.attributes || m.tasks.segmentation);
  EXPECT_EQ(m.size(), 1u);
}

TEST(Manifest, PoseRecordWithoutHeadSizeRejected) {
  TempDir d;
  write_png(d / "a.png");
  std::ofstream(d / "m.json")
      << R"({"name":"t","tasks":["pose"],"joints":{"names":["a"]},"records":[{"image":"a.png","joints":[[1,2,1]]}]})";
  try {
    load_manifest(d / "m.json");
    FAIL() << "expected ManifestError";
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.record(), 0);
    EXPECT_EQ(e.field(), "head_size");
  }
}

TEST(Manifest, MissingImageNamed) {
  TempDir d;
  std::ofstream(d / "m.json") << R"({"name":"t","tasks":["reid"],"records":[{"image":"nope.png","person_id":1}]})";
  EXPECT_THROW(load_manifest(d / "m.json"), ManifestError);
  EXPECT_NO_THROW(load_manifest(d / "m.json", false));
}

TEST(Manifest, FlagRecordConsistency) {
  auto m = pk_manifest({2, 2});
  m.records[1].person_id.reset();
  EXPECT_THROW(m.validate(), ManifestError);
  m = pk_manifest({2, 2});
  m.records[0].attributes = std::vector<int>{1};
  EXPECT_THROW(m.validate(), ManifestError);
}

TEST(Manifest, JsonRoundTrip) {
  TempDir d;
  const auto m = generate_synthetic({.num_ids = 2, .samples_per_id = 3}, d.path());
  save_manifest(m, d / "copy.json");
  const auto back = load_manifest(d / "copy.json");
  EXPECT_EQ(to_json(back), to_json(m));
}

TEST(PkBatches, SmallComposition) {
  const auto m = pk_manifest({3, 3, 3, 3});
  const auto plan = make_pk_batches(m, 2, 2, 7);
  ASSERT_EQ(plan.batches.size(), 2u);
  for (const auto& b : plan.batches) {
    EXPECT_EQ(b.indices.size(), 4u);
    EXPECT_TRUE(pk_holds(m, b, 2, 2));
  }
}

TEST(PkBatches, SingletonIdentityRepeatedK) {
  const auto m = pk_manifest({1, 5});
  const auto plan = make_pk_batches(m, 2, 4, 1);
  const auto& b = plan.batches.at(0);
  int singleton = 0;
  for (auto i : b.indices)
    if (i == 0) ++singleton;
  EXPECT_EQ(singleton, 4);
}

TEST(PkBatches, UniformIdentityFrequencyAndDeterminism) {
  const auto m = pk_manifest(std::vector<int>(20, 6));
  const auto plan = make_pk_batches(m, 8, 4, 3, 10000);
  ASSERT_EQ(plan.batches.size(), 10000u);
  std::map<std::int64_t, long> seen;
  for (const auto& b : plan.batches) {
    ASSERT_TRUE(pk_holds(m, b, 8, 4));
    for (auto i : b.indices) ++seen[*m.records[i].person_id];
  }
  const double expect = 10000.0 * 32 / 20;
  for (auto& [id, c] : seen) EXPECT_NEAR(c / expect, 1.0, 0.1);
  const auto again = make_pk_batches(m, 8, 4, 3, 10000);
  for (std::size_t i = 0; i < plan.batches.size(); i += 997) EXPECT_EQ(plan.batches[i].indices, again.batches[i].indices);
  EXPECT_THROW(make_pk_batches(m, 21, 4, 3), CompositionError);
}

TEST(Interleave, SingleFragmentVerbatim) {
  const auto m = pk_manifest({4, 4, 4});
  PlanFragment f{"a", m.size(), make_pk_batches(m, 2, 2, 1, 10)};
  for (auto& b : f.plan.batches) b.dataset = "a";
  const auto plan = interleave({f}, 5);
  ASSERT_EQ(plan.batches.size(), f.plan.batches.size());
  for (std::size_t i = 0; i < plan.batches.size(); ++i) EXPECT_EQ(plan.batches[i].indices, f.plan.batches[i].indices);
}

TEST(Interleave, FrequenciesFollowSizes) {
  auto frag = [](const std::string& n, std::size_t size) {
    PlanFragment f{n, size, {}};
    f.plan.batches.push_back({n, {0}});
    return f;
  };
  {
    const auto plan = interleave({frag("a", 100), frag("b", 300)}, 9, 10000);
    double a = 0;
    for (const auto& b : plan.batches) a += b.dataset == "a";
    EXPECT_NEAR(a / 10000, 0.25, 0.02);
  }
  {
    const std::size_t sizes[3] = {12936, 15855, 30462};
    const auto plan = interleave({frag("m", sizes[0]), frag("p", sizes[1]), frag("l", sizes[2])}, 4, 10000);
    std::map<std::string, double> n;
    for (const auto& b : plan.batches) n[b.dataset] += 1;
    const double total = sizes[0] + sizes[1] + sizes[2];
    EXPECT_NEAR(n["m"] / 10000, sizes[0] / total, 0.02);
    EXPECT_NEAR(n["p"] / 10000, sizes[1] / total, 0.02);
    EXPECT_NEAR(n["l"] / 10000, sizes[2] / total, 0.02);
  }
}

TEST(Augment, HflipIsInvolution) {
  const auto s = toy_sample();
  FlipPairs pairs{{{0, 1}}, {{1, 2}}};
  Sample t = s;
  t.image = s.image.clone();
  t.mask = s.mask->clone();
  hflip(t, pairs);
  hflip(t, pairs);
  EXPECT_EQ(cv::norm(t.image, s.image, cv::NORM_INF), 0.0);
  EXPECT_EQ(cv::norm(*t.mask, *s.mask, cv::NORM_INF), 0.0);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_DOUBLE_EQ(t.joints->joints[j].x, s.joints->joints[j].x);
    EXPECT_EQ(t.joints->joints[j].visible, s.joints->joints[j].visible);
  }
}

TEST(Augment, HflipMirrorsAndSwapsLeftRight) {
  Sample s = toy_sample();
  hflip(s, FlipPairs{{{0, 1}}, {{1, 2}}});
  // Joint 0 was at x=10; after the mirror it sits at 117 in slot 1.
  EXPECT_DOUBLE_EQ(s.joints->joints[1].x, 117.0);
  EXPECT_DOUBLE_EQ(s.joints->joints[1].y, 20.0);
  EXPECT_DOUBLE_EQ(s.joints->joints[0].x, 27.0);
  // Mirroring and swapping the two halves' labels leaves the mask unchanged.
  EXPECT_EQ(s.mask->at<std::uint8_t>(0, 127), 2);
  EXPECT_EQ(s.mask->at<std::uint8_t>(0, 0), 1);
}

TEST(Augment, IdentityAffine) {
  const auto s = toy_sample();
  Sample t = s;
  t.image = s.image.clone();
  apply_affine(t, 0, 0, 0, 1);
  EXPECT_EQ(cv::norm(t.image, s.image, cv::NORM_INF), 0.0);
  EXPECT_DOUBLE_EQ(t.joints->joints[0].x, 10.0);
}

TEST(Augment, LabelsStayConsistent) {
  // Transforming a prediction exactly like its ground truth keeps PCKh and mIoU perfect.
  Rng rng(12);
  AugmentOps ops{0.5, AffineRange{}};
  FlipPairs pairs{{{0, 1}}, {{1, 2}}};
  for (int it = 0; it < 20; ++it) {
    const auto seed = rng.next();
    Rng a(seed), b(seed);
    const auto gt = augment(toy_sample(), ops, pairs, a);
    const auto pred = augment(toy_sample(), ops, pairs, b);
    std::vector<JointSet> g{*gt.joints}, p{*pred.joints};
    bool any_visible = false;
    for (const auto& j : g[0].joints) any_visible |= j.visible;
    if (any_visible) EXPECT_DOUBLE_EQ(metrics::pckh(p, g).avg, 1.0);
    std::vector<Mask> gm{to_mask(*gt.mask)}, pm{to_mask(*pred.mask)};
    EXPECT_DOUBLE_EQ(metrics::seg_eval(pm, gm, 4).mIoU, 1.0);
  }
}

TEST(Augment, AffineRejectedForReidOnlyData) {
  TaskFlags reid;
  reid.reid = true;
  AugmentOps ops{0.5, AffineRange{}};
  EXPECT_THROW(ops.validate(reid), ConfigError);
  ops.affine.reset();
  EXPECT_NO_THROW(ops.validate(reid));
}

TEST(MergeClasses, IdentityBackgroundAndHistogram) {
  Mask m(4, 4);
  Rng rng(2);
  for (auto& l : m.labels) l = static_cast<std::uint8_t>(rng.below(20));
  EXPECT_EQ(merge_classes(m, ClassMapping::identity(20)).labels, m.labels);
  Mask bg(3, 3);
  EXPECT_EQ(merge_classes(bg, ClassMapping::lip_to_five()).labels, bg.labels);

  Mask big(16, 16);
  for (auto& l : big.labels) l = rng.bernoulli(0.05) ? kIgnoreLabel : static_cast<std::uint8_t>(rng.below(20));
  const auto map = ClassMapping::lip_to_five();
  std::map<int, int> src, want, got;
  for (auto l : big.labels) ++src[l];
  for (auto [l, c] : src) want[l == kIgnoreLabel ? l : map.to[l]] += c;
  for (auto l : merge_classes(big, map).labels) ++got[l];
  EXPECT_EQ(got, want);
  for (int c = 0; c < 20; ++c) EXPECT_GE(map.to[c], 0);
}

TEST(MergeClasses, UnmappedLabelRejected) {
  Mask m(1, 1);
  m.labels = {7};
  EXPECT_THROW(merge_classes(m, ClassMapping::identity(5)), MappingError);
  const auto j = ClassMapping::lip_to_five().to_json();
  EXPECT_EQ(ClassMapping::from_json(j).to, ClassMapping::lip_to_five().to);
}

TEST(LimitIdentities, Semantics) {
  auto m = pk_manifest({2, 2, 2, 2, 2});
  const auto all = limit_identities(m, 5, 1);
  EXPECT_EQ(to_json(all), to_json(m));
  const auto two = limit_identities(m, 2, 1);
  EXPECT_EQ(two.identities().size(), 2u);
  EXPECT_EQ(to_json(limit_identities(m, 2, 1)), to_json(two));
  EXPECT_THROW(limit_identities(m, 6, 1), BoundsError);
}

TEST(Synthetic, CountsFlagsAndDeterminism) {
  TempDir a, b;
  const auto m = generate_synthetic({.num_ids = 2, .samples_per_id = 3, .seed = 4}, a.path());
  EXPECT_EQ(m.size(), 6u);
  EXPECT_TRUE(m.tasks.reid && m.tasks.attributes && m.tasks.pose && m.tasks.segmentation);
  generate_synthetic({.num_ids = 2, .samples_per_id = 3, .seed = 4}, b.path());
  for (const auto& e : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), a.path());
    std::ifstream fa(e.path(), std::ios::binary), fb(b.path() / rel, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
    EXPECT_EQ(sa, sb) << rel;
  }
}

TEST(Synthetic, JointsLandInTheirParts) {
  TempDir d;
  const auto m = generate_synthetic({.num_ids = 8, .samples_per_id = 4, .seed = 9}, d.path());
  const auto parts = synthetic_joint_parts();
  int total = 0, inside = 0;
  for (const auto& r : m.records) {
    cv::Mat mk = cv::imread(m.resolve(*r.mask).string(), cv::IMREAD_GRAYSCALE);
    for (std::size_t j = 0; j < r.joints->joints.size(); ++j) {
      const auto& jt = r.joints->joints[j];
      if (!jt.visible) continue;
      ++total;
      const int x = static_cast<int>(std::lround(jt.x)), y = static_cast<int>(std::lround(jt.y));
      if (x >= 0 && y >= 0 && x < mk.cols && y < mk.rows && mk.at<std::uint8_t>(y, x) == parts[j]) ++inside;
    }
  }
  EXPECT_GE(inside, 0.99 * total);
}

TEST(Synthetic, QueryGallerySplit) {
  TempDir d;
  const auto m = generate_synthetic({.num_ids = 3, .samples_per_id = 4, .query_gallery = true}, d.path());
  EXPECT_EQ(m.indices(Split::Query).size(), 3u);
  EXPECT_EQ(m.indices(Split::Gallery).size(), 9u);
}

TEST(Convert, MarketLayout) {
  TempDir src, out;
  write_png(src / "bounding_box_train/0002_c1s1_000451_03.jpg");
  write_png(src / "bounding_box_train/0002_c2s1_000551_01.jpg");
  write_png(src / "bounding_box_train/0007_c1s1_000100_01.jpg");
  write_png(src / "query/0003_c1s1_000001_00.jpg");
  write_png(src / "bounding_box_test/0003_c3s1_000301_00.jpg");
  write_png(src / "bounding_box_test/-1_c3s1_000301_00.jpg");
  write_png(src / "bounding_box_test/0000_c1s1_000001_00.jpg");
  const auto m = convert_market(src.path(), out.path());
  EXPECT_EQ(m.size(), 7u);
  EXPECT_EQ(m.identities(Split::Train).size(), 2u);
  auto ids = m.identities();
  ids.erase(std::remove(ids.begin(), ids.end(), -1), ids.end());
  EXPECT_EQ(ids.size(), 3u);
  EXPECT_NO_THROW(load_manifest(out / "manifest.json"));
}

TEST(Convert, MalformedLayoutListsMissingPieces) {
  TempDir src, out;
  std::filesystem::create_directories(src / "query");
  try {
    convert_market(src.path(), out.path());
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    const std::string w = e.what();
    EXPECT_NE(w.find("bounding_box_train"), std::string::npos);
    EXPECT_NE(w.find("bounding_box_test"), std::string::npos);
    EXPECT_EQ(w.find("query/"), std::string::npos);
  }
  EXPECT_THROW(convert_lip(src.path(), out.path()), LoadError);
  EXPECT_THROW(convert_mpii(src.path(), out.path()), LoadError);
}

TEST(Convert, LipMergedMasks) {
  TempDir src, out;
  write_png(src / "TrainVal_images/train_images/1_a.jpg", 8, 4);
  cv::Mat seg(8, 4, CV_8UC1);
  for (int i = 0; i < 32; ++i) seg.data[i] = static_cast<std::uint8_t>(i % 20);
  std::filesystem::create_directories(src / "TrainVal_parsing_annotations/train_segmentations");
  cv::imwrite((src / "TrainVal_parsing_annotations/train_segmentations/1_a.png").string(), seg);
  const auto m = convert_lip(src.path(), out.path(), true);
  ASSERT_EQ(m.size(), 1u);
  cv::Mat mk = cv::imread(m.resolve(*m.records[0].mask).string(), cv::IMREAD_GRAYSCALE);
  double mx = 0;
  cv::minMaxLoc(mk, nullptr, &mx);
  EXPECT_LE(mx, 4.0);
  EXPECT_EQ(m.part_names.size(), 5u);
}

TEST(Convert, MpiiAnnotations) {
  TempDir src, out;
  write_png(src / "img/a.png", 40, 40);
  json joints = json::array();
  for (int j = 0; j < 16; ++j) joints.push_back({10 + j, 12 + j, 1});
  json ann = json::array({{{"image", "img/a.png"}, {"joints", joints}, {"head_box", {0, 0, 6, 8}}, {"bbox", {5, 5, 30, 30}}}});
  std::ofstream(src / "annotations.json") << ann.dump();
  const auto m = convert_mpii(src.path(), out.path());
  ASSERT_EQ(m.size(), 1u);
  EXPECT_DOUBLE_EQ(m.records[0].joints->joints[0].x, 5.0);
  EXPECT_NEAR(m.records[0].joints->head_size, 6.0, 1e-12);
}
