#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "swm/optimizer.hpp"
#include "swm/tensor.hpp"

namespace swm {

// Little-endian stream primitives. Readers throw IoError carrying the byte
// offset of the failure.
class BinWriter {
public:
    explicit BinWriter(std::ostream& out) : out_(out) {}

    void u16(std::uint16_t v);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void bytes(const void* data, std::size_t n);
    std::size_t offset() const { return offset_; }

private:
    std::ostream& out_;
    std::size_t offset_ = 0;
};

class BinReader {
public:
    explicit BinReader(std::istream& in) : in_(in) {}

    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    void bytes(void* data, std::size_t n);
    bool at_eof();
    std::size_t offset() const { return offset_; }
    [[noreturn]] void fail(const std::string& msg) const;

private:
    std::istream& in_;
    std::size_t offset_ = 0;
};

// stable digest of a text blob (resolved config) for checkpoint compatibility
std::uint64_t digest_bytes(const std::string& text);

// Versioned parameter container: magic "SWM1", config digest, then named
// arrays (name, rank, dims, 64-bit float payload).
struct Checkpoint {
    std::uint64_t config_digest = 0;
    std::vector<std::pair<std::string, Tensor>> arrays;

    const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

// Bundle a parameter store plus optimizer moments and scalar counters into a
// checkpoint. Optimizer arrays are prefixed "opt.<label>.", counters "meta.".
void checkpoint_put_store(Checkpoint& c, const ParamStore& store);
void checkpoint_put_adam(Checkpoint& c, const std::string& label, const Adam& opt,
                         const ParamStore& store);
void checkpoint_put_counter(Checkpoint& c, const std::string& name, double value);

// Restore by name; shapes must match exactly.
void checkpoint_get_store(const Checkpoint& c, ParamStore& store);
void checkpoint_get_adam(const Checkpoint& c, const std::string& label, Adam& opt,
                         const ParamStore& store);
double checkpoint_get_counter(const Checkpoint& c, const std::string& name);

}  // namespace swm
