#include <gtest/gtest.h>

#include "flatec/synth.hpp"

using namespace flatec;

TEST(Synth, DeterministicBytesPerSeed) {
  SceneSpec s;
  s.points = 5000;
  s.seed = 4;
  const auto a = serialize_kitti_bin(synth_scan(s));
  EXPECT_EQ(a, serialize_kitti_bin(synth_scan(s)));
  s.seed = 5;
  EXPECT_NE(a, serialize_kitti_bin(synth_scan(s)));
}

TEST(Synth, ExactCountInsideBounds) {
  SceneSpec s;
  s.extent = {3.2, 4.8, 2.4};
  s.sensor_height = 1.2;
  s.points = 7777;
  const auto c = synth_scan(s);
  ASSERT_EQ(c.size(), 7777u);
  for (const auto& p : c.points)
    for (int a = 0; a < 3; ++a) {
      ASSERT_GE(p[a], 0.0);
      ASSERT_LT(p[a], s.extent[a]);
    }
}

TEST(Synth, SceneHasStructure) {
  SceneSpec s;
  s.points = 20000;
  const auto scene = make_scene(s);
  EXPECT_EQ(static_cast<int>(scene.boxes.size()), s.boxes);
  EXPECT_EQ(static_cast<int>(scene.poles.size()), s.poles);
  const auto c = synth_scan(s);
  std::size_t ground = 0, above = 0;
  for (const auto& p : c.points) (std::abs(p[2] - s.ground_height) < 0.03 ? ground : above)++;
  EXPECT_GT(ground, c.size() / 10);
  EXPECT_GT(above, c.size() / 10);
}

TEST(Synth, RayHitsNearestSurface) {
  SceneSpec s;
  s.boxes = 0;
  s.poles = 0;
  auto scene = make_scene(s);
  scene.boxes.push_back({{4.0, 2.0, 0.0}, {5.0, 4.0, 2.0}});
  const auto hit = cast_ray(scene, {1.0, 0.0, 0.0});
  ASSERT_TRUE(hit.has_value());
  EXPECT_NEAR((*hit)[0], 4.0, 1e-12);
  const auto down = cast_ray(scene, {0.0, 0.0, -1.0});
  ASSERT_TRUE(down.has_value());
  EXPECT_NEAR((*down)[2], s.ground_height, 1e-12);
  EXPECT_FALSE(cast_ray(scene, {0.0, 0.0, 1.0}).has_value());
}

TEST(Synth, SpecParsing) {
  const auto s = parse_scene_spec("extent=3.2x3.2x3.2,points=100,seed=9,boxes=2,poles=0,sensor_height=1.0");
  EXPECT_EQ(s.points, 100u);
  EXPECT_EQ(s.seed, 9u);
  EXPECT_EQ(s.extent[1], 3.2);
  EXPECT_THROW(parse_scene_spec("color=red"), DataError);
  EXPECT_THROW(parse_scene_spec("points=abc"), DataError);
  EXPECT_THROW(parse_scene_spec("points=0"), DataError);
}
