#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "doctest.h"
#include "swm/error.hpp"
#include "swm/io.hpp"
#include "swm/optimizer.hpp"
#include "swm/rng.hpp"
#include "swm/tape.hpp"
#include "swm/tensor.hpp"

using namespace swm;

namespace {

std::string tmp_path(const char* stem) {
    return std::string("io_test_") + stem + ".bin";
}

Tensor random_tensor(Shape s, Rng& rng) {
    Tensor t{s};
    for (double& v : t.data) v = rng.normal(0.0, 3.0);
    return t;
}

std::string read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_all(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size()));
}

}  // namespace

TEST_CASE("stream primitives round-trip and are little-endian") {
    std::ostringstream os(std::ios::binary);
    BinWriter w(os);
    w.u16(0x1234);
    w.u32(0xdeadbeefu);
    w.u64(0x0102030405060708ULL);
    w.f64(-1.5);
    CHECK(w.offset() == 2 + 4 + 8 + 8);

    std::string bytes = os.str();
    CHECK(static_cast<unsigned char>(bytes[0]) == 0x34);  // low byte first
    CHECK(static_cast<unsigned char>(bytes[1]) == 0x12);
    CHECK(static_cast<unsigned char>(bytes[2]) == 0xef);

    std::istringstream is(bytes, std::ios::binary);
    BinReader r(is);
    CHECK(r.u16() == 0x1234);
    CHECK(r.u32() == 0xdeadbeefu);
    CHECK(r.u64() == 0x0102030405060708ULL);
    CHECK(r.f64() == -1.5);
    CHECK(r.at_eof());
}

TEST_CASE("reader reports the byte offset of a truncated read") {
    std::string bytes = "\x01\x02\x03";  // 3 bytes, then ask for a u32
    std::istringstream is(bytes, std::ios::binary);
    BinReader r(is);
    CHECK(r.u16() == 0x0201);
    try {
        r.u32();
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("byte offset 2") != std::string::npos);
    }
}

TEST_CASE("digest is stable and input-sensitive") {
    const std::uint64_t d = digest_bytes("lr=0.001\nseed=7\n");
    CHECK(d == digest_bytes("lr=0.001\nseed=7\n"));
    CHECK(d != digest_bytes("lr=0.001\nseed=8\n"));
    CHECK(digest_bytes("") != digest_bytes(std::string("\0", 1)));
}

TEST_CASE("checkpoint round-trips tensors exactly") {
    Rng rng(12);
    Checkpoint c;
    c.config_digest = 0xabcdef0123456789ULL;
    c.arrays.emplace_back("a", random_tensor(Shape(5), rng));
    c.arrays.emplace_back("b.weight", random_tensor(Shape(3, 4), rng));
    c.arrays.emplace_back("c.cube", random_tensor(Shape(2, 3, 2), rng));
    Tensor special{Shape(std::size_t(6))};
    special.data = {0.0, -0.0, 1e-308, 1e308, std::numeric_limits<double>::min(), 0.1};
    c.arrays.emplace_back("special", special);

    const std::string path = tmp_path("roundtrip");
    save_checkpoint(path, c);
    Checkpoint back = load_checkpoint(path);

    CHECK(back.config_digest == c.config_digest);
    REQUIRE(back.arrays.size() == c.arrays.size());
    for (std::size_t i = 0; i < c.arrays.size(); ++i) {
        CHECK(back.arrays[i].first == c.arrays[i].first);
        REQUIRE(back.arrays[i].second.shape == c.arrays[i].second.shape);
        for (std::size_t j = 0; j < c.arrays[i].second.numel(); ++j)
            CHECK(back.arrays[i].second.data[j] == c.arrays[i].second.data[j]);
    }
    // signed zero survives the trip bit-for-bit
    CHECK(std::signbit(back.find("special")->data[1]));

    // byte-identical on re-save
    save_checkpoint(tmp_path("roundtrip2"), back);
    CHECK(read_all(path) == read_all(tmp_path("roundtrip2")));

    std::remove(path.c_str());
    std::remove(tmp_path("roundtrip2").c_str());
}

TEST_CASE("find returns null for unknown names") {
    Checkpoint c;
    c.arrays.emplace_back("x", Tensor::scalar(1.0));
    CHECK(c.find("x") != nullptr);
    CHECK(c.find("y") == nullptr);
}

TEST_CASE("corrupt files are rejected with an offset") {
    Rng rng(3);
    Checkpoint c;
    c.arrays.emplace_back("w", random_tensor(Shape(4, 4), rng));
    const std::string path = tmp_path("corrupt");
    save_checkpoint(path, c);
    const std::string good = read_all(path);

    SUBCASE("bad magic") {
        std::string bad = good;
        bad[0] = 'X';
        write_all(path, bad);
        CHECK_THROWS_AS(load_checkpoint(path), IoError);
    }
    SUBCASE("truncated payload names the failing offset") {
        write_all(path, good.substr(0, good.size() - 5));
        try {
            load_checkpoint(path);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
        }
    }
    SUBCASE("trailing garbage rejected") {
        write_all(path, good + "junk");
        CHECK_THROWS_AS(load_checkpoint(path), IoError);
    }
    SUBCASE("absurd dimension rejected") {
        // dims live after magic(4) + digest(8) + n(4) + name_len(4) + "w"(1) + rank(4)
        std::string bad = good;
        std::size_t dim_at = 4 + 8 + 4 + 4 + 1 + 4;
        for (int i = 0; i < 8; ++i) bad[dim_at + i] = char(0xff);
        write_all(path, bad);
        CHECK_THROWS_AS(load_checkpoint(path), IoError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_checkpoint("no_such_dir/nope.bin"), IoError);
    }
    std::remove(path.c_str());
}

TEST_CASE("parameter store round-trips through a checkpoint") {
    Rng rng(9);
    ParamStore store;
    store.add("layer.w", random_tensor(Shape(6, 3), rng));
    store.add("layer.b", random_tensor(Shape(std::size_t(6)), rng));

    Checkpoint c;
    checkpoint_put_store(c, store);
    checkpoint_put_counter(c, "env_steps", 12345.0);

    ParamStore fresh;
    fresh.add("layer.w", Tensor{Shape(6, 3)});
    fresh.add("layer.b", Tensor{Shape(std::size_t(6))});
    checkpoint_get_store(c, fresh);
    CHECK(max_abs_diff(fresh.value(std::size_t(0)), store.value(std::size_t(0))) == 0.0);
    CHECK(max_abs_diff(fresh.value(std::size_t(1)), store.value(std::size_t(1))) == 0.0);
    CHECK(checkpoint_get_counter(c, "env_steps") == 12345.0);

    SUBCASE("missing array is an error") {
        ParamStore other;
        other.add("unknown", Tensor{Shape(std::size_t(2))});
        CHECK_THROWS_AS(checkpoint_get_store(c, other), IoError);
    }
    SUBCASE("shape mismatch is an error") {
        ParamStore other;
        other.add("layer.w", Tensor{Shape(3, 6)});
        CHECK_THROWS_AS(checkpoint_get_store(c, other), IoError);
    }
    SUBCASE("missing counter is an error") {
        CHECK_THROWS_AS(checkpoint_get_counter(c, "nope"), IoError);
    }
}

TEST_CASE("optimizer state round-trips and resumes identically") {
    // two stores trained in lockstep; one detours through a checkpoint file
    auto build = [](ParamStore& s) {
        s.add("w", Tensor::of({1.0, -2.0, 0.5}));
    };
    auto grad_for = [](const ParamStore& s) {
        Tensor g = s.value(std::size_t(0));
        for (double& v : g.data) v = 0.3 * v + 0.1;
        return std::vector<Tensor>{g};
    };

    ParamStore sa, sb;
    build(sa);
    build(sb);
    Adam oa{AdamConfig{.lr = 1e-2}}, ob{AdamConfig{.lr = 1e-2}};
    for (int i = 0; i < 7; ++i) {
        oa.step(sa, grad_for(sa));
        ob.step(sb, grad_for(sb));
    }

    Checkpoint c;
    c.config_digest = digest_bytes("cfg");
    checkpoint_put_store(c, sa);
    checkpoint_put_adam(c, "main", oa, sa);
    const std::string path = tmp_path("adam");
    save_checkpoint(path, c);

    ParamStore sr;
    build(sr);
    Adam orr{AdamConfig{.lr = 1e-2}};
    Checkpoint back = load_checkpoint(path);
    checkpoint_get_store(back, sr);
    checkpoint_get_adam(back, "main", orr, sr);
    CHECK(orr.steps() == 7);

    for (int i = 0; i < 5; ++i) {
        oa.step(sa, grad_for(sa));
        orr.step(sr, grad_for(sr));
    }
    CHECK(max_abs_diff(sa.value(std::size_t(0)), sr.value(std::size_t(0))) == 0.0);

    SUBCASE("unstepped optimizer saves only its counter") {
        Checkpoint c2;
        Adam idle;
        checkpoint_put_adam(c2, "idle", idle, sa);
        CHECK(c2.arrays.size() == 1);
        Adam idle2;
        idle2.set_steps(99);
        checkpoint_get_adam(c2, "idle", idle2, sa);
        CHECK(idle2.steps() == 0);
        CHECK(idle2.moment1().empty());
    }
    std::remove(path.c_str());
}
