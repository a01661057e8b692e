#include <gtest/gtest.h>

#include "test_util.hpp"
#include "websod/checkpoint.hpp"

using namespace websod;

namespace {

det::DetectorConfig odd_config() {
  det::DetectorConfig c;
  c.num_classes = 5;
  c.backbone_channels = {3, 5, 7};
  c.backbone_strides = {1, 2, 2};
  c.rpn_channels = 6;
  c.anchor_sizes = {9.5, 21.0};
  c.anchor_ratios = {0.5, 1.0};
  c.pool_size = 2;
  c.fc_dim = 11;
  c.cam_channels = 4;
  c.detection_nms_iou = 0.45;
  c.reg_weights = {8.0, 9.0, 4.0, 3.5};
  return c;
}

}  // namespace

TEST(Checkpoint, DetectorRoundTripIsBitExact) {
  const auto p = det::init_detector(odd_config(), 17);
  const auto bytes = serialize_detector(p);
  const auto q = deserialize_detector(bytes);
  EXPECT_EQ(serialize_detector(q), bytes);
  EXPECT_EQ(q.config.anchor_sizes, p.config.anchor_sizes);
  EXPECT_EQ(q.config.reg_weights, p.config.reg_weights);
  EXPECT_EQ(q.config.detection_nms_iou, 0.45);
  std::vector<const Tensor*> a;
  for_each_tensor(const_cast<det::DetectorParams&>(p), [&](const std::string&, Tensor& t) { a.push_back(&t); });
  std::size_t k = 0;
  auto qq = q;
  for_each_tensor(qq, [&](const std::string& name, Tensor& t) {
    EXPECT_EQ(t.shape, a[k]->shape) << name;
    EXPECT_EQ(t.data, a[k]->data) << name;
    ++k;
  });
}

TEST(Checkpoint, FileRoundTripAndDigest) {
  const auto dir = websod::testing::temp_dir("ckpt");
  const auto p = det::init_detector(odd_config(), 3);
  save_detector(dir / "d.ckpt", p);
  const auto q = load_detector(dir / "d.ckpt");
  EXPECT_EQ(digest(p), digest(q));
  EXPECT_EQ(digest(p).size(), 64u);
  // Same seed, same digest; different seed, different digest.
  EXPECT_EQ(digest(det::init_detector(odd_config(), 3)), digest(p));
  EXPECT_NE(digest(det::init_detector(odd_config(), 4)), digest(p));
  auto r = p;
  r.cls.bias.data[0] += 1e-12;
  EXPECT_NE(digest(r), digest(p));
}

TEST(Checkpoint, RfrRoundTrip) {
  auto block = rfr::make_rfr_block(7, 4, 2);
  std::mt19937_64 rng(5);
  block.conv3.weight = websod::testing::random_tensor(block.conv3.weight.shape, rng);
  const auto back = deserialize_rfr(serialize_rfr(block));
  EXPECT_EQ(digest(back), digest(block));
  EXPECT_EQ(back.channels(), 7);
  EXPECT_EQ(back.conv3.weight.data, block.conv3.weight.data);
}

TEST(Checkpoint, KnownSha256) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Checkpoint, RejectsForeignCorruptAndMismatchedFiles) {
  const auto p = det::init_detector(odd_config(), 1);
  const auto bytes = serialize_detector(p);
  EXPECT_THROW(deserialize_detector("hello world"), CheckpointError);
  EXPECT_THROW(deserialize_detector(bytes.substr(0, bytes.size() - 9)), CheckpointError);
  EXPECT_THROW(deserialize_detector(bytes + "x"), CheckpointError);
  auto wrong_version = bytes;
  wrong_version.replace(wrong_version.find("version=1"), 9, "version=9");
  try {
    deserialize_detector(wrong_version);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version 9"), std::string::npos);
  }
  EXPECT_THROW(deserialize_rfr(bytes), CheckpointError);
  EXPECT_THROW(deserialize_detector(serialize_rfr(rfr::make_rfr_block(3, 2, 1))), CheckpointError);
  const auto dir = websod::testing::temp_dir("ckpt_missing");
  try {
    load_detector(dir / "nope.ckpt");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("nope.ckpt"), std::string::npos);
  }
}

TEST(Checkpoint, DetectorConfigKeyValueRoundTrip) {
  const auto c = odd_config();
  const auto back = detector_config_from_kv(detector_config_to_kv(c));
  EXPECT_EQ(back.backbone_channels, c.backbone_channels);
  EXPECT_EQ(back.backbone_strides, c.backbone_strides);
  EXPECT_EQ(back.anchor_ratios, c.anchor_ratios);
  EXPECT_EQ(back.fc_dim, c.fc_dim);
  EXPECT_EQ(back.num_classes, c.num_classes);
}
