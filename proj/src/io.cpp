#include "swm/io.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "swm/error.hpp"
#include "swm/rng.hpp"

namespace swm {

void BinWriter::bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), std::streamsize(n));
    if (!out_) throw IoError("write failed", offset_);
    offset_ += n;
}

void BinWriter::u16(std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    bytes(b, 2);
}

void BinWriter::u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 4);
}

void BinWriter::u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
}

void BinWriter::f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    u64(bits);
}

void BinReader::fail(const std::string& msg) const { throw IoError(msg, offset_); }

void BinReader::bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), std::streamsize(n));
    if (std::size_t(in_.gcount()) != n) fail("unexpected end of file");
    offset_ += n;
}

std::uint16_t BinReader::u16() {
    unsigned char b[2];
    bytes(b, 2);
    return std::uint16_t(b[0] | (std::uint16_t(b[1]) << 8));
}

std::uint32_t BinReader::u32() {
    unsigned char b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
}

std::uint64_t BinReader::u64() {
    unsigned char b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

double BinReader::f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
}

bool BinReader::at_eof() {
    return in_.peek() == std::char_traits<char>::eof();
}

std::uint64_t digest_bytes(const std::string& text) {
    std::uint64_t h = 0x243f6a8885a308d3ULL;
    for (unsigned char c : text) h = hash_u64(h, c);
    h = hash_u64(h, text.size());
    return h;
}

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : arrays)
        if (n == name) return &t;
    return nullptr;
}

namespace {
constexpr char kMagic[4] = {'S', 'W', 'M', '1'};
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    BinWriter w(out);
    w.bytes(kMagic, 4);
    w.u64(c.config_digest);
    w.u32(std::uint32_t(c.arrays.size()));
    for (const auto& [name, t] : c.arrays) {
        w.u32(std::uint32_t(name.size()));
        w.bytes(name.data(), name.size());
        w.u32(std::uint32_t(t.shape.rank));
        for (int d = 0; d < t.shape.rank; ++d) w.u64(t.shape.d[d]);
        for (double v : t.data) w.f64(v);
    }
    out.flush();
    if (!out) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    BinReader r(in);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) r.fail("bad magic, not a checkpoint file");
    Checkpoint c;
    c.config_digest = r.u64();
    std::uint32_t n = r.u32();
    c.arrays.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        std::uint32_t len = r.u32();
        if (len > 4096) r.fail("array name longer than 4096 bytes");
        std::string name(len, '\0');
        r.bytes(name.data(), len);
        std::uint32_t rank = r.u32();
        if (rank > 3) r.fail("array rank above 3");
        Shape s;
        s.rank = int(rank);
        for (std::uint32_t d = 0; d < rank; ++d) {
            std::uint64_t dim = r.u64();
            if (dim == 0 || dim > (1u << 28)) r.fail("array dimension out of range");
            s.d[d] = std::size_t(dim);
        }
        Tensor t{s};
        for (double& v : t.data) v = r.f64();
        c.arrays.emplace_back(std::move(name), std::move(t));
    }
    if (!r.at_eof()) r.fail("trailing bytes after last array");
    return c;
}

void checkpoint_put_store(Checkpoint& c, const ParamStore& store) {
    for (std::size_t i = 0; i < store.size(); ++i)
        c.arrays.emplace_back(store.name(i), store.value(i));
}

void checkpoint_put_adam(Checkpoint& c, const std::string& label, const Adam& opt,
                         const ParamStore& store) {
    c.arrays.emplace_back("opt." + label + ".t", Tensor::scalar(double(opt.steps())));
    if (opt.moment1().empty()) return;  // never stepped, nothing else to save
    if (opt.moment1().size() != store.size())
        throw ContractError("checkpoint: optimizer does not match the store");
    for (std::size_t i = 0; i < store.size(); ++i) {
        c.arrays.emplace_back("opt." + label + ".m." + store.name(i), opt.moment1()[i]);
        c.arrays.emplace_back("opt." + label + ".v." + store.name(i), opt.moment2()[i]);
    }
}

void checkpoint_put_counter(Checkpoint& c, const std::string& name, double value) {
    c.arrays.emplace_back("meta." + name, Tensor::scalar(value));
}

void checkpoint_get_store(const Checkpoint& c, ParamStore& store) {
    for (std::size_t i = 0; i < store.size(); ++i) {
        const Tensor* t = c.find(store.name(i));
        if (!t) throw IoError("checkpoint missing array: " + store.name(i));
        if (t->shape != store.value(i).shape)
            throw IoError("checkpoint shape mismatch for: " + store.name(i));
        store.value(i) = *t;
    }
}

void checkpoint_get_adam(const Checkpoint& c, const std::string& label, Adam& opt,
                         const ParamStore& store) {
    const Tensor* t = c.find("opt." + label + ".t");
    if (!t) throw IoError("checkpoint missing optimizer state: " + label);
    opt.set_steps((long long)t->item());
    opt.moment1().clear();
    opt.moment2().clear();
    if (store.size() == 0 || !c.find("opt." + label + ".m." + store.name(0))) return;
    for (std::size_t i = 0; i < store.size(); ++i) {
        const Tensor* m = c.find("opt." + label + ".m." + store.name(i));
        const Tensor* v = c.find("opt." + label + ".v." + store.name(i));
        if (!m || !v) throw IoError("checkpoint missing moments for: " + store.name(i));
        if (m->shape != store.value(i).shape || v->shape != store.value(i).shape)
            throw IoError("checkpoint moment shape mismatch for: " + store.name(i));
        opt.moment1().push_back(*m);
        opt.moment2().push_back(*v);
    }
}

double checkpoint_get_counter(const Checkpoint& c, const std::string& name) {
    const Tensor* t = c.find("meta." + name);
    if (!t) throw IoError("checkpoint missing counter: " + name);
    return t->item();
}

}  // namespace swm
