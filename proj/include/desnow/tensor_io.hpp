#pragma once

// ".dsnt" raw tensor dumps:
//   "DSNT" | u32 version (=1) | u32 rank | u32 extents[rank] | f32 data...
// All integers and floats little-endian, data row-major.

#include "desnow/tensor.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>

namespace desnow {

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class U>
void write_le(std::ostream& os, U v)
{
    static_assert(std::is_trivially_copyable_v<U>);
    std::array<char, sizeof(U)> bytes;
    std::memcpy(bytes.data(), &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(U));
}

template <class U>
U read_le(std::istream& is)
{
    std::array<char, sizeof(U)> bytes;
    if (!is.read(bytes.data(), sizeof(U)))
        throw FormatError("unexpected end of stream");
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(bytes.begin(), bytes.end());
    U v;
    std::memcpy(&v, bytes.data(), sizeof(U));
    return v;
}

inline void expect_magic(std::istream& is, const char (&magic)[5])
{
    char got[4];
    if (!is.read(got, 4) || std::memcmp(got, magic, 4) != 0)
        throw FormatError(std::string("bad magic, expected \"") + magic + "\"");
}

/// rank, extents and f32 payload; shared by .dsnt and checkpoint entries.
template <class T>
void write_tensor_body(std::ostream& os, const Tensor<T>& t)
{
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape())
        write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
    for (T v : t.values())
        write_le<float>(os, static_cast<float>(v));
}

template <class T>
Tensor<T> read_tensor_body(std::istream& is)
{
    const auto rank = read_le<std::uint32_t>(is);
    if (rank == 0 || rank > 8)
        throw FormatError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& e : shape) {
        e = read_le<std::uint32_t>(is);
        if (e == 0)
            throw FormatError("zero tensor extent");
        count *= static_cast<std::uint64_t>(e);
        if (count > (std::uint64_t{1} << 34))
            throw FormatError("tensor too large");
    }
    std::vector<T> data(static_cast<std::size_t>(count));
    for (auto& v : data)
        v = static_cast<T>(read_le<float>(is));
    return Tensor<T>(std::move(shape), std::move(data));
}

} // namespace detail

inline constexpr std::uint32_t kTensorDumpVersion = 1;

template <class T>
void write_dsnt(std::ostream& os, const Tensor<T>& t)
{
    os.write("DSNT", 4);
    detail::write_le<std::uint32_t>(os, kTensorDumpVersion);
    detail::write_tensor_body(os, t);
    if (!os)
        throw FormatError("failed writing tensor dump");
}

template <class T = float>
Tensor<T> read_dsnt(std::istream& is)
{
    detail::expect_magic(is, "DSNT");
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != kTensorDumpVersion)
        throw FormatError("unsupported .dsnt version " + std::to_string(version));
    return detail::read_tensor_body<T>(is);
}

template <class T>
void save_dsnt(const std::filesystem::path& path, const Tensor<T>& t)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw FormatError("cannot open " + path.string() + " for writing");
    write_dsnt(os, t);
}

template <class T = float>
Tensor<T> load_dsnt(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw FormatError("cannot open " + path.string());
    return read_dsnt<T>(is);
}

} // namespace desnow
