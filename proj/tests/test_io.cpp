#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "fastmvs/io.hpp"
#include "fastmvs/scene.hpp"

using namespace fastmvs;
namespace fs = std::filesystem;

namespace {

// Rotation about z by atan2(0.8, 0.6); every entry exact in binary.
const char* kCamFixture =
    "extrinsic\n"
    "0.6 -0.8 0 10.5\n"
    "0.8 0.6 0 -3\n"
    "0 0 1 700\n"
    "0 0 0 1\n"
    "\n"
    "intrinsic\n"
    "361.54 0 82.9\n"
    "0 360.99 66.38\n"
    "0 0 1\n"
    "\n"
    "425 2.5 192 933.8\n";

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fastmvs_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(CamFile, FixtureFieldsAreExact) {
  const CamFile cam = parse_cam(kCamFixture, "fixture");
  Mat3 r;
  r << 0.6, -0.8, 0, 0.8, 0.6, 0, 0, 0, 1;
  EXPECT_EQ(cam.pose.rotation(), r);
  EXPECT_EQ(cam.pose.translation(), Vec3(10.5, -3, 700));
  EXPECT_EQ(cam.intrinsics, Intrinsics(361.54, 360.99, 82.9, 66.38));
  EXPECT_EQ(cam.depth_min, 425.0);
  EXPECT_EQ(cam.depth_interval, 2.5);
  EXPECT_EQ(cam.depth_range(192).max, 425.0 + 2.5 * 191);
}

TEST(CamFile, RoundTripIsBitExact) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 50; ++i) {
    CamFile cam;
    cam.pose = look_at_pose(Vec3(600 * u(rng), 100 * u(rng), -600), Vec3(u(rng), u(rng), 0), Vec3(0, -1, 0));
    cam.intrinsics = Intrinsics(100 + 50 * u(rng), 100 + 50 * u(rng), 32 + u(rng), 32 + u(rng));
    cam.depth_min = 400 + 100 * u(rng);
    cam.depth_interval = 40 + u(rng);
    const std::string text = format_cam(cam);
    const CamFile back = parse_cam(text, "mem");
    EXPECT_TRUE(back == cam);
    EXPECT_EQ(format_cam(back), text);
  }
}

TEST(CamFile, MalformedInputReportsLine) {
  std::string bad = kCamFixture;
  bad.replace(bad.find("0 0 0 1"), 7, "0 0 1 1");
  try {
    parse_cam(bad, "bad.txt");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 5u);
  }
  std::string skew = kCamFixture;
  skew.replace(skew.find("361.54 0 82.9"), 13, "361.54 1 82.9");
  EXPECT_THROW(parse_cam(skew, "skew"), ParseError);
  EXPECT_THROW(parse_cam(std::string(kCamFixture) + "junk\n", "trail"), ParseError);
  EXPECT_THROW(parse_cam("extrinsic\n1 0 0\n", "short"), ParseError);
}

TEST(Pfm, SingleValuePayload) {
  const std::string bytes = encode_pfm(Tensor({1, 1}, 42.0));
  EXPECT_EQ(bytes, std::string("Pf\n1 1\n-1\n") + std::string("\x00\x00\x28\x42", 4));
}

TEST(Pfm, BigEndianFixture) {
  // 2 x 1 map, bottom row first: row 1 = 1.5, row 0 = -2.0, big-endian.
  const std::string bytes = std::string("Pf\n1 2\n1.0\n") + std::string("\x3f\xc0\x00\x00", 4) +
                            std::string("\xc0\x00\x00\x00", 4);
  const Tensor t = decode_pfm(bytes, "be");
  EXPECT_EQ(t(0, 0), -2.0);
  EXPECT_EQ(t(1, 0), 1.5);
}

TEST(Pfm, RoundTripIsBitExact) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(0.0f, 1000.0f);
  Tensor t({7, 5});
  for (double& v : t.storage()) v = static_cast<double>(u(rng));
  const std::string bytes = encode_pfm(t);
  const Tensor back = decode_pfm(bytes, "mem");
  EXPECT_EQ(back, t);
  EXPECT_EQ(encode_pfm(back), bytes);
  EXPECT_THROW(decode_pfm(bytes.substr(0, bytes.size() - 1), "short"), ParseError);
  EXPECT_THROW(decode_pfm("PF\n1 1\n-1\n0000", "rgb"), ParseError);
}

TEST(Ppm, RoundTripOfQuantisedImage) {
  Tensor img({3, 4, 6});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = static_cast<double>((i * 37) % 256) / 255.0;
  const std::string bytes = encode_ppm(img);
  const Tensor back = decode_ppm(bytes, "mem");
  EXPECT_EQ(encode_ppm(back), bytes);
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_NEAR(back[i], img[i], 1e-15);
  EXPECT_NO_THROW(decode_ppm("P6\n# comment\n1 1\n255\nabc", "comment"));
}

TEST(Ply, RoundTripIsBitExact) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-500.0f, 500.0f);
  PointCloud cloud;
  for (int i = 0; i < 100; ++i)
    cloud.add(Vec3(u(rng), u(rng), u(rng)),
              {static_cast<std::uint8_t>(i), static_cast<std::uint8_t>(255 - i), static_cast<std::uint8_t>(7 * i)});
  const std::string bytes = encode_ply(cloud);
  const PointCloud back = decode_ply(bytes, "mem");
  EXPECT_EQ(back.points, cloud.points);
  EXPECT_EQ(back.colors, cloud.colors);
  EXPECT_EQ(encode_ply(back), bytes);
  EXPECT_EQ(bytes.size() - bytes.find("end_header\n") - 11, 100u * 15u);
  EXPECT_THROW(decode_ply(bytes.substr(0, bytes.size() - 3), "short"), ParseError);
}

TEST(Pairs, ParseFormatValidate) {
  const PairList one = parse_pairs("1\n0 1 1\n", "p");
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].reference, 0u);
  EXPECT_EQ(one[0].sources, std::vector<std::size_t>{1});
  EXPECT_EQ(parse_pairs(format_pairs(one), "p"), one);
  EXPECT_THROW(parse_pairs("1\n0 1 0\n", "self"), ParseError);
  EXPECT_THROW(parse_pairs("2\n0 1 1\n", "short"), ParseError);
  EXPECT_THROW(parse_pairs("1\n0 2 1\n", "count"), ParseError);
  try {
    validate_pairs(one, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Validation);
  }
}

TEST(Pairs, FiveViewsGiveFourSources) {
  const PairList p = nearest_pairs(5, 4);
  for (const auto& e : p) EXPECT_EQ(e.sources.size(), 4u);
  EXPECT_EQ(nearest_pairs(5, 2)[2].sources, (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(nearest_pairs(5, 2)[0].sources, (std::vector<std::size_t>{1, 2}));
}

TEST(Bundle, SinglePair) {
  SceneData scene;
  for (int i = 0; i < 2; ++i) {
    CameraView v;
    v.id = view_name(i);
    scene.views.push_back(v);
    scene.gt_depth.emplace_back(std::nullopt);
  }
  scene.pairs = parse_pairs("1\n0 1 1\n", "p");
  const ViewBundle b = make_bundle(scene, scene.pairs[0]);
  EXPECT_EQ(b.reference.id, "00000000");
  ASSERT_EQ(b.sources.size(), 1u);
  EXPECT_EQ(b.sources[0].id, "00000001");
}

TEST(Renderer, AxisAlignedPlaneHasConstantDepth) {
  SceneSpec s;
  s.rig.count = 3;
  s.rig.elevation_deg = 0.0;
  s.rig.radius = 500.0;
  s.surface.normal = Vec3(0, 0, -1);
  s.surface.offset = 0.0;
  const auto views = render_scene(s);
  for (double d : views[1].depth.values()) EXPECT_NEAR(d, 500.0, 1e-9);
}

TEST(Scene, WriteThenLoadMatchesMemory) {
  SceneSpec s;
  s.rig.count = 3;
  const auto views = render_scene(s);
  const fs::path dir = temp_dir("scene");
  write_scene(dir, s, views, nearest_pairs(3, 2));
  const SceneData scene = load_scene(dir, s.planes);
  ASSERT_EQ(scene.views.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(scene.views[i].intrinsics, views[i].view.intrinsics);
    EXPECT_EQ(scene.views[i].pose.rotation(), views[i].view.pose.rotation());
    EXPECT_EQ(scene.views[i].depth_range.max, s.depth_range().max);
    ASSERT_TRUE(scene.gt_depth[i].has_value());
    EXPECT_LE(max_abs_diff(*scene.gt_depth[i], views[i].depth), 1e-4);
    EXPECT_LE(max_abs_diff(scene.views[i].image, views[i].view.image), 0.5 / 255.0 + 1e-12);
  }
  fs::remove(dir / "pair.txt");
  EXPECT_THROW(load_scene(dir, s.planes), Error);
  fs::remove_all(dir);
}

TEST(Scene, RenderingIsDeterministic) {
  SceneSpec s;
  const auto a = render_scene(s), b = render_scene(s);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].depth, b[i].depth);
    EXPECT_EQ(a[i].view.image, b[i].view.image);
  }
}
