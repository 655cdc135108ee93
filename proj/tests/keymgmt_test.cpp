#include "scl/keymgmt.hpp"

#include <gtest/gtest.h>

#include <random>
#include <set>

#include "scl/capsule_core.hpp"
#include "test_util.hpp"

namespace scl {
namespace {

KeyNode owner() { return KeyNode::master_from_seed(to_bytes("owner seed for tests")); }

TEST(DeriveChild, Deterministic) {
  auto o = owner();
  auto a = derive_child(o, 5, true);
  auto b = derive_child(o, 5, true);
  EXPECT_EQ(a.public_key, b.public_key);
  EXPECT_EQ(a.chain_code, b.chain_code);
  EXPECT_EQ(a.private_key->scalar(), b.private_key->scalar());
  EXPECT_EQ(format_path(a.path), "m/5'");
}

TEST(DeriveChild, DistinctIndicesGiveDistinctKeys) {
  auto o = owner();
  std::set<crypto::CompressedPoint> seen;
  for (std::uint32_t i = 0; i < 10; ++i) seen.insert(derive_child(o, i, false).public_key.compressed());
  EXPECT_EQ(seen.size(), 10u);
  EXPECT_NE(derive_child(o, 3, true).public_key, derive_child(o, 3, false).public_key);
}

TEST(DeriveChild, PublicAndPrivatePathsAgree) {
  auto app = derive_child(owner(), 1, true);
  std::mt19937_64 rng(9);
  for (int i = 0; i < 50; ++i) {
    auto idx = static_cast<std::uint32_t>(rng() & kMaxChildIndex);
    auto via_private = derive_child(app, idx, false);
    auto via_public = derive_child(app.neutered(), idx, false);
    EXPECT_EQ(via_private.public_key, via_public.public_key);
    EXPECT_EQ(via_private.chain_code, via_public.chain_code);
    EXPECT_FALSE(via_public.has_private());
  }
}

TEST(DeriveChild, GrandchildPublicKeyTwoWays) {
  auto o = owner();
  auto app = derive_child(o, 0, true);
  auto via_privates = derive_child(app, 3, false).private_key->public_key();
  auto via_public = derive_writer_public(app.neutered(), 3);
  EXPECT_EQ(via_privates, via_public);
}

TEST(DeriveChild, HardenedFromPublicOnlyThrows) {
  auto pub = owner().neutered();
  EXPECT_THROW(derive_child(pub, 0, true), NeedsPrivateKey);
  EXPECT_THROW(derive_child(owner(), 0x80000000u, false), std::invalid_argument);
}

TEST(Path, ParseAndFormat) {
  auto p = parse_path("m/0'/2");
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p[0], (PathStep{0, true}));
  EXPECT_EQ(p[1], (PathStep{2, false}));
  EXPECT_EQ(format_path(p), "m/0'/2");
  EXPECT_TRUE(parse_path("m").empty());
  for (auto bad : {"", "x/1", "m/", "m//1", "m/1''", "m/2147483648", "m/-1", "m/1/"})
    EXPECT_THROW(parse_path(bad), ParseError) << bad;
  auto o = owner();
  EXPECT_EQ(derive_path(o, parse_path("m/0'/2")).public_key, derive_child(derive_child(o, 0, true), 2, false).public_key);
}

TEST(ProvisionWorkers, CountsDeliveries) {
  auto p = provision_workers(owner(), 0, 4);
  EXPECT_EQ(p.workers.size(), 4u);
  EXPECT_EQ(p.deliveries.size(), 5u);
  int broadcasts = 0;
  for (const auto& d : p.deliveries) broadcasts += d.kind == KeyDelivery::Kind::kAppPublicBroadcast;
  EXPECT_EQ(broadcasts, 1);
  EXPECT_FALSE(p.app_public.has_private());
  EXPECT_EQ(format_path(p.workers[2].node.path), "m/0'/2");
}

TEST(ProvisionWorkers, PeerVerifiesWithAppPublicOnly) {
  auto p = provision_workers(owner(), 0, 4);
  RecordHeader h{3, 1, 0, MsgType::kData, {kGenesis}};
  auto r = seal_record(h, to_bytes("x"), p.workers[3].group_key, *p.workers[3].node.private_key);
  // Worker 2 only holds app_public.
  auto key = derive_writer_public(p.app_public, 3);
  EXPECT_EQ(verify_record(r, key), VerifyStatus::kOk);
}

TEST(ProvisionWorkers, LeakedWorkerKeyDoesNotExposeOwner) {
  auto o = owner();
  auto p = provision_workers(o, 0, 4);
  const auto& leaked = *p.workers[2].node.private_key;

  // The non-hardened step is invertible from public material: this is the
  // known HD exposure of the app key to a holder of a leaked writer key.
  ByteWriter d;
  d.raw(p.app_public.public_key.compressed());
  d.u32(2);
  auto il = crypto::hmac_sha512(p.app_public.chain_code, d.bytes());
  auto tweak = crypto::reduce_scalar(ByteView(il.data(), 32));
  auto recovered_app = leaked.add_tweak(crypto::negate_scalar(tweak));
  EXPECT_EQ(recovered_app.public_key(), p.app_public.public_key);

  // The hardened step needs the owner private key inside the HMAC input, so the
  // same inversion using only public owner material yields a wrong key.
  ByteWriter hd;
  hd.raw(o.public_key.compressed());
  hd.u32(0 | 0x80000000u);
  auto guess_il = crypto::hmac_sha512(o.chain_code, hd.bytes());
  auto guess_tweak = crypto::reduce_scalar(ByteView(guess_il.data(), 32));
  auto reconstructed_app = o.public_key.add_tweak(guess_tweak);
  EXPECT_NE(reconstructed_app, p.app_public.public_key);
}

TEST(Rotate, NewGenerationRejectsOldKeysInNewEpochs) {
  auto o = owner();
  auto gen0 = provision_workers(o, 0, 3);
  KeyRing ring(gen0.app_public, 0);
  auto bundle = rotate(o, 1, 3);
  ring.add_generation(decode_public_node(bundle.announced_app_public), 5);
  ASSERT_TRUE(ring.knows_generation(bundle.announced_app_public));

  RecordHeader h_new{1, 10, 6, MsgType::kData, {kGenesis}};
  auto stale = seal_record(h_new, to_bytes("x"), gen0.workers[1].group_key, *gen0.workers[1].node.private_key);
  EXPECT_EQ(verify_record(stale, ring.verify_key(1, 6)), VerifyStatus::kBadSignature);

  auto fresh = seal_record(h_new, to_bytes("x"), bundle.provisioning.workers[1].group_key,
                           *bundle.provisioning.workers[1].node.private_key);
  EXPECT_EQ(verify_record(fresh, ring.verify_key(1, 6)), VerifyStatus::kOk);

  RecordHeader h_old{1, 3, 2, MsgType::kData, {kGenesis}};
  auto historical = seal_record(h_old, to_bytes("x"), gen0.workers[1].group_key, *gen0.workers[1].node.private_key);
  EXPECT_EQ(verify_record(historical, ring.verify_key(1, 2)), VerifyStatus::kOk);
  EXPECT_NE(bundle.provisioning.workers[1].group_key, gen0.workers[1].group_key);
}

TEST(KeyRing, GenerationsMustAdvance) {
  auto o = owner();
  KeyRing ring(provision_workers(o, 0, 1).app_public, 3);
  EXPECT_THROW(ring.add_generation(provision_workers(o, 1, 1).app_public, 3), std::invalid_argument);
}

TEST(PublicNode, EncodeDecode) {
  auto app = derive_child(owner(), 4, true).neutered();
  auto dec = decode_public_node(encode_public_node(app));
  EXPECT_EQ(dec.public_key, app.public_key);
  EXPECT_EQ(dec.chain_code, app.chain_code);
  Bytes junk(65, 0x07);
  EXPECT_THROW(decode_public_node(junk), ParseError);
}

}  // namespace
}  // namespace scl
