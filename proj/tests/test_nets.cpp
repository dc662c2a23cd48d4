#include "doctest_torch.hpp"

#include <cmath>

#include "gradcheck.hpp"
#include "smd/checkpoint.hpp"
#include "smd/error.hpp"
#include "smd/nets.hpp"
#include "smd/training.hpp"
#include "test_support.hpp"

using namespace smd;
using namespace smd::nets;

namespace {

NetConfig small_config() {
  NetConfig cfg;
  cfg.anatomy_width = 8;
  cfg.decoder_width = 8;
  cfg.contrast_width = 8;
  cfg.critic_width = 8;
  return cfg;
}

}  // namespace

TEST_SUITE("nets") {
  TEST_CASE("anatomy codes: shapes, simplex and one-hot") {
    const auto nets = Networks::create(NetConfig{}, 1);
    torch::manual_seed(3);
    const auto x = torch::rand({3, 1, 32, 32});
    const auto soft = encode_anatomy(nets, x, AnatomyMode::soft, 0.5);
    CHECK(soft.sizes() == torch::IntArrayRef{3, 8, 32, 32});
    CHECK((soft >= 0).all().item<bool>());
    CHECK((soft.sum(1) - 1).abs().max().item<double>() < 1e-5);
    const auto hard = encode_anatomy(nets, x, AnatomyMode::hard, 0.5);
    CHECK((hard.sum(1) == 1).all().item<bool>());
    CHECK(((hard == 0) | (hard == 1)).all().item<bool>());
    CHECK(torch::equal(hard, encode_anatomy(nets, x, AnatomyMode::hard, 0.5)));
    const auto st = encode_anatomy(nets, x, AnatomyMode::straight_through, 0.5);
    CHECK(torch::allclose(st, hard));
  }

  TEST_CASE("low-temperature soft argmax agrees with hard mode") {
    const auto nets = Networks::create(NetConfig{}, 2);
    torch::manual_seed(4);
    const auto x = torch::rand({4, 1, 32, 32});
    const auto soft = encode_anatomy(nets, x, AnatomyMode::soft, 0.01);
    const auto hard = encode_anatomy(nets, x, AnatomyMode::hard, 0.5);
    const double agree = label_map(soft).eq(label_map(hard)).to(torch::kFloat64).mean().item<double>();
    CHECK(agree >= 0.99);
  }

  TEST_CASE("straight-through passes the softmax gradient") {
    const auto nets = Networks::create(NetConfig{}, 5);
    const auto x = torch::rand({2, 1, 32, 32});
    auto a = encode_anatomy(nets, x, AnatomyMode::straight_through, 0.5);
    (a * torch::randn_like(a)).sum().backward();
    double norm = 0;
    for (const auto& p : nets.anatomy->parameters()) norm += p.grad().abs().sum().item<double>();
    CHECK(norm > 0);
  }

  TEST_CASE("size checks") {
    const auto nets = Networks::create(NetConfig{}, 1);
    test::check_throws_with<ValidationError>([&] { encode_anatomy(nets, torch::rand({1, 1, 20, 32}), AnatomyMode::soft, 0.5); },
                                             "divisible by 8");
    test::check_throws_with<ValidationError>([&] { encode_contrast(nets, torch::rand({1, 1, 64, 64})); }, "32x32");
    CHECK_THROWS_AS(decode(nets, torch::rand({1, 5, 32, 32}), torch::rand({1, 2})), ValidationError);
    CHECK_THROWS_AS(encode_anatomy(nets, torch::rand({1, 1, 32, 32}), AnatomyMode::soft, 0.0), ValidationError);
  }

  TEST_CASE("contrast code, decoder range and critic initialisation") {
    const auto nets = Networks::create(NetConfig{}, 1);
    const auto zero = encode_contrast(nets, torch::zeros({1, 1, 32, 32}));
    CHECK(zero.sizes() == torch::IntArrayRef{1, 2});
    CHECK(torch::isfinite(zero).all().item<bool>());
    const auto x = torch::rand({2, 1, 32, 32});
    const auto a = encode_anatomy(nets, x, AnatomyMode::soft, 0.5);
    const auto c = encode_contrast(nets, x);
    const auto xh = decode(nets, a, c);
    CHECK(xh.sizes() == x.sizes());
    CHECK((xh >= 0).all().item<bool>());
    CHECK((xh <= 1).all().item<bool>());
    CHECK(torch::equal(xh, decode(nets, a, c)));
    CHECK((critic_t(nets, c, torch::ones({2, 1, 32, 32})) == 0).all().item<bool>());
    CHECK((discriminator_u(nets, a, c) == 0.5).all().item<bool>());
    CHECK(training::discriminator_loss(discriminator_u_logits(nets, a, c), discriminator_u_logits(nets, a, c.flip(0)))
              .item<double>() == doctest::Approx(2 * std::log(2.0)));
  }

  TEST_CASE("discriminator output stays strictly inside (0, 1) under random weights") {
    auto nets = gradcheck::double_networks(small_config(), 9);
    nets.to(torch::kFloat32);
    torch::manual_seed(10);
    torch::NoGradGuard guard;
    for (int rep = 0; rep < 100; ++rep) {
      const auto a = torch::softmax(torch::randn({100, 8, 32, 32}) * 3, 1);
      const auto u = discriminator_u(nets, a, torch::randn({100, 2}) * 3);
      CHECK((u > 0).all().item<bool>());
      CHECK((u < 1).all().item<bool>());
    }
  }

  TEST_CASE("broadcast_concat appends c as constant planes") {
    const auto f = torch::zeros({2, 3, 4, 4});
    const auto c = torch::tensor({{1.f, 2.f}, {3.f, 4.f}});
    const auto out = broadcast_concat(f, c);
    CHECK(out.sizes() == torch::IntArrayRef{2, 5, 4, 4});
    CHECK(out[1][4][2][3].item<float>() == 4.f);
  }

  TEST_CASE("creation is deterministic per seed; clone is independent") {
    const auto a = Networks::create(NetConfig{}, 7);
    const auto b = Networks::create(NetConfig{}, 7);
    CHECK(checksum(a) == checksum(b));
    CHECK(checksum(a) != checksum(Networks::create(NetConfig{}, 8)));
    auto c = a.clone();
    CHECK(checksum(c) == checksum(a));
    {
      torch::NoGradGuard g;
      c.decoder->parameters().front().add_(1.0);
    }
    CHECK(checksum(c) != checksum(a));
  }

  TEST_CASE("checkpoint round-trip and mismatch errors") {
    const auto nets = Networks::create(small_config(), 3);
    KeyValueConfig train;
    train.set("seed", "3");
    const auto bytes = encode_checkpoint(nets, train);
    const auto back = decode_checkpoint(bytes);
    CHECK(checksum(back.networks) == checksum(nets));
    CHECK(back.train_config.raw("seed") == "3");

    const auto dir = test::scratch_dir("ckpt");
    save_checkpoint(dir / "a.smdckpt", nets, train);
    auto other = Networks::create(NetConfig{}, 1);
    CHECK_THROWS_AS(load_into(other, dir / "a.smdckpt"), ValidationError);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 10)), IoError);
    CHECK_THROWS_AS(decode_checkpoint("XXXX" + bytes.substr(4)), IoError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.smdckpt"), IoError);
  }

  TEST_CASE("64-bit gradient check on every network") {
    for (const auto& r : gradcheck::check_all(small_config(), 21, 20)) {
      INFO(r.network << " skipped kink " << r.skipped_kink << " zero " << r.skipped_zero);
      CHECK(r.checked >= 20);
      CHECK(r.max_rel_error <= 1e-3);
    }
  }
}
