#include "px3d/io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include "px3d/error.hpp"

namespace px3d::io {

namespace {

constexpr char kMagic[8] = {'R', 'V', 'O', 'L', '1', '\0', '\0', '\0'};

template <typename T>
void put_le(std::string& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::string_view in, std::size_t offset) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        bits |= static_cast<U>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
    return std::bit_cast<T>(bits);
}

}  // namespace

std::string encode_volume(const Volume& v) {
    if (v.size() != static_cast<std::size_t>(v.dims[0]) * v.dims[1] * v.dims[2])
        throw FormatError("RVOL: payload length does not match dims");
    std::string out;
    out.reserve(kRvolHeaderBytes + v.size() * 4);
    out.append(kMagic, 8);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(kRvolHeaderBytes));
    for (int d : v.dims) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double s : v.spacing) put_le<double>(out, s);
    out.append("F32L", 4);
    out.append("DHW\0", 4);
    float mn = 0.0f, mx = 0.0f;
    if (!v.data.empty()) {
        const auto [lo, hi] = std::minmax_element(v.data.begin(), v.data.end());
        mn = *lo;
        mx = *hi;
    }
    put_le<float>(out, mn);
    put_le<float>(out, mx);
    for (float f : v.data) put_le<float>(out, f);
    return out;
}

Volume decode_volume(std::string_view bytes, const std::string& origin) {
    if (bytes.size() < kRvolHeaderBytes) throw FormatError(origin + ": truncated header");
    if (std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError(origin + ": bad magic");
    const auto header = get_le<std::uint32_t>(bytes, 8);
    if (header != kRvolHeaderBytes) throw FormatError(origin + ": unsupported header size " + std::to_string(header));
    if (bytes.substr(48, 4) != "F32L") throw FormatError(origin + ": unsupported dtype tag");
    if (bytes.substr(52, 3) != "DHW") throw FormatError(origin + ": unsupported axis order tag");
    std::array<int, 3> dims{};
    for (int a = 0; a < 3; ++a) {
        const auto d = get_le<std::uint32_t>(bytes, 12 + 4 * a);
        if (d == 0 || d > (1u << 20)) throw FormatError(origin + ": invalid dim " + std::to_string(a));
        dims[a] = static_cast<int>(d);
    }
    std::array<double, 3> spacing{};
    for (int a = 0; a < 3; ++a) spacing[a] = get_le<double>(bytes, 24 + 8 * a);
    const std::size_t count = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    const std::size_t payload = bytes.size() - kRvolHeaderBytes;
    if (payload < count * 4) throw FormatError(origin + ": truncated payload");
    if (payload > count * 4) throw FormatError(origin + ": payload longer than dims");
    Volume v(dims, spacing);
    for (std::size_t i = 0; i < count; ++i) v.data[i] = get_le<float>(bytes, kRvolHeaderBytes + 4 * i);
    return v;
}

void write_volume(const Volume& v, const fs::path& path) { atomic_write(path, encode_volume(v)); }

Volume read_volume(const fs::path& path) { return decode_volume(read_file(path), path.string()); }

void atomic_write(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return std::move(ss).str();
}

namespace {

struct PngWriteCtx {
    std::string* out;
};

void png_write_cb(png_structp png, png_bytep data, png_size_t len) {
    auto* ctx = static_cast<PngWriteCtx*>(png_get_io_ptr(png));
    ctx->out->append(reinterpret_cast<const char*>(data), len);
}

void png_flush_cb(png_structp) {}

struct PngReadCtx {
    std::string_view in;
    std::size_t pos = 0;
};

void png_read_cb(png_structp png, png_bytep data, png_size_t len) {
    auto* ctx = static_cast<PngReadCtx*>(png_get_io_ptr(png));
    if (ctx->pos + len > ctx->in.size()) png_error(png, "truncated PNG");
    std::memcpy(data, ctx->in.data() + ctx->pos, len);
    ctx->pos += len;
}

void png_error_cb(png_structp png, png_const_charp msg) {
    auto* err = static_cast<std::string*>(png_get_error_ptr(png));
    if (err) *err = msg;
    png_longjmp(png, 1);
}

void png_warn_cb(png_structp, png_const_charp) {}

}  // namespace

void write_png16(const Image& img, const fs::path& path) {
    std::string out;
    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_cb, png_warn_cb);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    std::vector<png_byte> row(static_cast<std::size_t>(img.cols) * 2);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG encode failed: " + err);
    }
    PngWriteCtx ctx{&out};
    png_set_write_fn(png, &ctx, png_write_cb, png_flush_cb);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.cols), static_cast<png_uint_32>(img.rows), 16,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < img.rows; ++r) {
        for (int c = 0; c < img.cols; ++c) {
            const double v = std::clamp(static_cast<double>(img.at(r, c)), 0.0, 1.0);
            const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
            row[2 * c] = static_cast<png_byte>(q >> 8);  // PNG is big-endian
            row[2 * c + 1] = static_cast<png_byte>(q & 0xFF);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    atomic_write(path, out);
}

Image read_png16(const fs::path& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
        throw FormatError(path.string() + ": not a PNG file");
    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_cb, png_warn_cb);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    Image img;
    std::vector<png_byte> row;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError(path.string() + ": PNG decode failed: " + err);
    }
    PngReadCtx ctx{bytes, 0};
    png_set_read_fn(png, &ctx, png_read_cb);
    png_read_info(png, info);
    const auto w = png_get_image_width(png, info);
    const auto h = png_get_image_height(png, info);
    const int depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (color != PNG_COLOR_TYPE_GRAY || depth != 16) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError(path.string() + ": expected 16-bit grayscale PNG");
    }
    img = Image(static_cast<int>(h), static_cast<int>(w));
    row.resize(static_cast<std::size_t>(w) * 2);
    for (png_uint_32 r = 0; r < h; ++r) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 c = 0; c < w; ++c) {
            const unsigned q = (static_cast<unsigned>(row[2 * c]) << 8) | row[2 * c + 1];
            img.at(static_cast<int>(r), static_cast<int>(c)) = static_cast<float>(q / 65535.0);
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (std::byte b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(std::as_bytes(std::span(s.data(), s.size()))); }

std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace px3d::io
