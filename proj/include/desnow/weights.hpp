#pragma once

// Named parameter collection and the ".dsnw" checkpoint format:
//   "DSNW" | u32 version (=1) | u32 count |
//   count x ( u16 name_len | name bytes (UTF-8) | u32 rank | u32 extents[rank] | f32 data... )

#include "desnow/random.hpp"
#include "desnow/tensor.hpp"
#include "desnow/tensor_io.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

namespace desnow {

enum class ParamKind { weight, bias, slope };

/// Parameter kind from the name suffix (".weight", ".bias", ".slope").
inline ParamKind param_kind(std::string_view name)
{
    if (name.ends_with(".bias"))
        return ParamKind::bias;
    if (name.ends_with(".slope"))
        return ParamKind::slope;
    return ParamKind::weight;
}

/// Insertion-ordered map from parameter name to tensor.
template <class T>
class ModelWeights {
public:
    struct Entry {
        std::string name;
        Tensor<T> tensor;
    };

    Tensor<T>& add(std::string name, Shape shape)
    {
        if (index_.count(name))
            throw Error("duplicate parameter name " + name);
        index_.emplace(name, entries_.size());
        entries_.push_back({std::move(name), Tensor<T>(std::move(shape))});
        entries_.back().tensor.set_requires_grad(true);
        return entries_.back().tensor;
    }

    bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

    const Tensor<T>& at(std::string_view name) const
    {
        auto it = index_.find(std::string(name));
        if (it == index_.end())
            throw Error("unknown parameter " + std::string(name));
        return entries_[it->second].tensor;
    }
    Tensor<T>& at(std::string_view name)
    {
        return const_cast<Tensor<T>&>(std::as_const(*this).at(name));
    }

    std::size_t size() const { return entries_.size(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& e : entries_)
            n += e.tensor.numel();
        return n;
    }

    void zero_grad()
    {
        for (auto& e : entries_)
            e.tensor.zero_grad();
    }

    /// Copy values from `other`; names and shapes must match exactly.
    template <class U>
    void assign_from(const ModelWeights<U>& other)
    {
        if (other.size() != size())
            throw FormatError("parameter count mismatch: " + std::to_string(other.size()) + " vs " +
                              std::to_string(size()));
        for (const auto& e : other) {
            if (!contains(e.name))
                throw FormatError("unexpected parameter " + e.name);
            auto& dst = at(e.name);
            if (dst.shape() != e.tensor.shape())
                throw FormatError("shape mismatch for " + e.name + ": " + to_string(e.tensor.shape()) +
                                  " vs " + to_string(dst.shape()));
            auto src = e.tensor.values();
            auto out = dst.mutable_values();
            for (std::size_t i = 0; i < src.size(); ++i)
                out[i] = static_cast<T>(src[i]);
        }
    }

    template <class U>
    ModelWeights<U> cast() const
    {
        ModelWeights<U> out;
        for (const auto& e : entries_) {
            auto& t = out.add(e.name, e.tensor.shape());
            auto src = e.tensor.values();
            auto dst = t.mutable_values();
            for (std::size_t i = 0; i < src.size(); ++i)
                dst[i] = static_cast<U>(src[i]);
        }
        return out;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void write_checkpoint(std::ostream& os, const ModelWeights<T>& weights)
{
    os.write("DSNW", 4);
    detail::write_le<std::uint32_t>(os, kCheckpointVersion);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(weights.size()));
    for (const auto& e : weights) {
        if (e.name.size() > 0xFFFF)
            throw FormatError("parameter name too long");
        detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        detail::write_tensor_body(os, e.tensor);
    }
    if (!os)
        throw FormatError("failed writing checkpoint");
}

template <class T = float>
ModelWeights<T> read_checkpoint(std::istream& is)
{
    detail::expect_magic(is, "DSNW");
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto count = detail::read_le<std::uint32_t>(is);
    ModelWeights<T> weights;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = detail::read_le<std::uint16_t>(is);
        std::string name(len, '\0');
        if (!is.read(name.data(), len))
            throw FormatError("truncated checkpoint entry name");
        auto t = detail::read_tensor_body<T>(is);
        auto& dst = weights.add(std::move(name), t.shape());
        std::copy(t.values().begin(), t.values().end(), dst.mutable_values().begin());
    }
    if (is.peek() != std::char_traits<char>::eof())
        throw FormatError("trailing bytes after checkpoint entries");
    return weights;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ModelWeights<T>& weights)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw FormatError("cannot open " + path.string() + " for writing");
    write_checkpoint(os, weights);
}

template <class T = float>
ModelWeights<T> load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw FormatError("cannot open checkpoint " + path.string());
    return read_checkpoint<T>(is);
}

/// Xavier/Glorot uniform initialisation for convolution kernels
/// (fan_in = in*kh*kw, fan_out = out*kh*kw); biases start at zero and PReLU
/// slopes at 0.25.
template <class T>
void xavier_init(ModelWeights<T>& weights, std::uint64_t seed)
{
    std::uint64_t index = 0;
    for (auto& e : weights) {
        auto v = e.tensor.mutable_values();
        switch (param_kind(e.name)) {
        case ParamKind::bias:
            std::fill(v.begin(), v.end(), T(0));
            break;
        case ParamKind::slope:
            std::fill(v.begin(), v.end(), T(0.25));
            break;
        case ParamKind::weight: {
            const auto& s = e.tensor.shape();
            double receptive = 1;
            for (std::size_t d = 2; d < s.size(); ++d)
                receptive *= static_cast<double>(s[d]);
            const double fan_in = static_cast<double>(s.size() > 1 ? s[1] : 1) * receptive;
            const double fan_out = static_cast<double>(s[0]) * receptive;
            const double limit = std::sqrt(6.0 / (fan_in + fan_out));
            Philox rng = Philox::derive(seed, index);
            for (auto& x : v)
                x = static_cast<T>(rng.uniform(-limit, limit));
            break;
        }
        }
        ++index;
    }
}

} // namespace desnow
