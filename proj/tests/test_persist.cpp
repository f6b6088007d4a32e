#include <gtest/gtest.h>

#include "ekpc/persist.hpp"
#include "support.hpp"

namespace ekpc {
namespace {

TrainConfig tiny_config() {
    TrainConfig c;
    c.hidden = 2;
    c.layers = 2;
    c.epochs_first = 1;
    c.epochs_rest = 1;
    c.epochs_unified = 1;
    c.replay_per_class = 5;
    c.batch_size = 8;
    return c;
}

ContinualState trained_state() {
    SyntheticStreamConfig s;
    s.tasks = 2;
    s.classes_per_task = 2;
    s.tokens = 3;
    s.dim = 5;
    s.samples_per_class = 10;
    return run_stream(make_synthetic_stream(s), tiny_config()).state;
}

std::size_t offset_of(auto&& decode, std::vector<char> bytes) {
    try {
        decode(std::move(bytes));
    } catch (const ParseError& e) {
        return e.offset();
    }
    ADD_FAILURE() << "expected ParseError";
    return 0;
}

TEST(Checkpoint, RoundTrip) {
    const ContinualState s = trained_state();
    Checkpoint ck = Checkpoint::from_state(s);
    ck.backbone.placement = AdapterPlacement::serial;
    ck.backbone.feature_offset.assign(5, 0.25);
    const auto bytes = encode_checkpoint(ck);
    const Checkpoint back = decode_checkpoint(bytes);
    EXPECT_TRUE(back == ck);
    EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, FileRoundTrip) {
    testing::TempDir dir("ckpt");
    const Checkpoint ck = Checkpoint::from_state(trained_state());
    save_checkpoint(dir.file("a.ekpc"), ck);
    EXPECT_TRUE(load_checkpoint(dir.file("a.ekpc")) == ck);
}

TEST(Checkpoint, CorruptFilesRejected) {
    const auto bytes = encode_checkpoint(Checkpoint::from_state(trained_state()));
    auto bad = bytes;
    bad[1] = 'X';
    EXPECT_EQ(offset_of(decode_checkpoint, bad), 0u);
    bad = bytes;
    bad[4] = 2;
    EXPECT_EQ(offset_of(decode_checkpoint, bad), 4u);
    bad = bytes;
    bad.resize(100);
    EXPECT_THROW(decode_checkpoint(bad), ParseError);
    bad = bytes;
    bad.push_back(1);
    EXPECT_EQ(offset_of(decode_checkpoint, bad), bytes.size());
    bad = bytes;
    bad[12] = 9;  // d_h >= d
    EXPECT_THROW(decode_checkpoint(bad), ParseError);
    EXPECT_THROW(load_checkpoint("/nonexistent/x.ekpc"), Error);
}

TEST(Checkpoint, NonFiniteWeightsRejected) {
    Checkpoint ck = Checkpoint::from_state(trained_state());
    auto bytes = encode_checkpoint(ck);
    // first W_block entry: header is 24 bytes; set its exponent bits to all ones
    bytes[24 + 6] = static_cast<char>(0xF0);
    bytes[24 + 7] = static_cast<char>(0x7F);
    EXPECT_EQ(offset_of(decode_checkpoint, bytes), 24u);
}

TEST(Prototypes, RoundTrip) {
    const ContinualState s = trained_state();
    const auto bytes = encode_prototypes(s.prototypes, 5);
    EXPECT_EQ(decode_prototypes(bytes), s.prototypes);
    testing::TempDir dir("proto");
    save_prototypes(dir.file("p.ekpp"), s.prototypes, 5);
    EXPECT_EQ(load_prototypes(dir.file("p.ekpp")), s.prototypes);
}

TEST(Prototypes, NegativeSpreadRejected) {
    const ContinualState s = trained_state();
    std::vector<Prototype> protos{s.prototypes.front()};
    auto bytes = encode_prototypes(protos, 5);
    // sign bit of the first stddev: 16 header + 12 ids + 40 mean
    bytes[16 + 12 + 40 + 7] = static_cast<char>(static_cast<unsigned char>(bytes[16 + 12 + 40 + 7]) | 0x80);
    if (protos[0].stddev[0] > 0.0) {
        EXPECT_EQ(offset_of(decode_prototypes, bytes), 28u);
    }
    bytes.resize(30);
    EXPECT_THROW(decode_prototypes(bytes), ParseError);
}

TEST(Importance, RoundTrip) {
    const ContinualState s = trained_state();
    const auto bytes = encode_importance(s.importance);
    const ImportanceState back = decode_importance(bytes);
    EXPECT_EQ(back.global, s.importance.global);
    EXPECT_EQ(back.last_task, 1);
    ASSERT_EQ(back.n_layers(), 2u);
    for (std::size_t l = 0; l < 2; ++l) {
        EXPECT_EQ(back.layers[l].fused.down, s.importance.layers[l].fused.down);
        EXPECT_EQ(back.layers[l].fused.up, s.importance.layers[l].fused.up);
        EXPECT_EQ(back.layers[l].local_up, s.importance.layers[l].local_up);
    }
    EXPECT_EQ(encode_importance(back), bytes);
}

TEST(Importance, FreshStateKeepsSentinelTask) {
    const ImportanceState z = ImportanceState::zeros(4, 2, 3);
    EXPECT_EQ(decode_importance(encode_importance(z)).last_task, -1);
}

TEST(Importance, WrongMagic) {
    auto bytes = encode_importance(ImportanceState::zeros(4, 2, 1));
    bytes[3] = 'C';
    EXPECT_EQ(offset_of(decode_importance, bytes), 0u);
}

}  // namespace
}  // namespace ekpc
