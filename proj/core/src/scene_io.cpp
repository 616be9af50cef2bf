#include "sceneseg/scene_io.hpp"

#include <png.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "sceneseg/errors.hpp"

namespace sceneseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// palettes
// ---------------------------------------------------------------------------

int Palette::find_color(uint8_t r, uint8_t g, uint8_t b) const {
    for (size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i].rgb;
        if (e[0] == r && e[1] == g && e[2] == b) return static_cast<int>(i);
    }
    return -1;
}

int Palette::find_name(const std::string& name) const {
    for (size_t i = 0; i < entries.size(); ++i)
        if (entries[i].name == name) return static_cast<int>(i);
    return -1;
}

void Palette::validate() const {
    if (entries.empty()) throw ConfigError("palette: no entries");
    for (size_t i = 0; i < entries.size(); ++i)
        for (size_t j = i + 1; j < entries.size(); ++j)
            if (entries[i].rgb == entries[j].rgb)
                throw ConfigError(detail::msg("palette: entries '", entries[i].name, "' and '",
                                              entries[j].name, "' share one color"));
}

Palette default_palette() {
    return Palette{{
        {"impervious_surfaces", {255, 255, 255}},
        {"buildings", {0, 0, 255}},
        {"low_vegetation", {0, 255, 255}},
        {"trees", {0, 255, 0}},
        {"cars", {255, 255, 0}},
        {"clutter", {255, 0, 0}},
    }};
}

Palette fallback_palette() {
    return Palette{{
        {"cluster0", {230, 25, 75}},
        {"cluster1", {60, 180, 75}},
        {"cluster2", {255, 225, 25}},
        {"cluster3", {0, 130, 200}},
        {"cluster4", {245, 130, 48}},
        {"cluster5", {145, 30, 180}},
        {"cluster6", {70, 240, 240}},
        {"cluster7", {240, 50, 230}},
    }};
}

Palette load_palette(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(detail::msg("cannot open palette file ", path.string()));
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(detail::msg("palette ", path.string(), ": invalid JSON: ", e.what()));
    }
    if (!doc.is_array()) throw FormatError(detail::msg("palette ", path.string(), ": expected a JSON array"));
    Palette p;
    for (const auto& item : doc) {
        if (!item.contains("name") || !item.contains("rgb") || !item["rgb"].is_array() ||
            item["rgb"].size() != 3)
            throw FormatError(detail::msg("palette ", path.string(),
                                          ": entries need {name, rgb:[r,g,b]}"));
        PaletteEntry e;
        e.name = item["name"].get<std::string>();
        for (int i = 0; i < 3; ++i) {
            const int v = item["rgb"][i].get<int>();
            if (v < 0 || v > 255)
                throw FormatError(detail::msg("palette ", path.string(), ": rgb component ", v,
                                              " out of [0, 255]"));
            e.rgb[i] = static_cast<uint8_t>(v);
        }
        p.entries.push_back(std::move(e));
    }
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

namespace {

struct FileHandle {
    FILE* f = nullptr;
    explicit FileHandle(const fs::path& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {}
    ~FileHandle() {
        if (f) std::fclose(f);
    }
    FileHandle(const FileHandle&) = delete;
    FileHandle& operator=(const FileHandle&) = delete;
};

struct PngRead {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngRead() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    }
};

struct PngWrite {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWrite() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    }
};

RawImage read_png_file(const fs::path& path) {
    FileHandle file(path, "rb");
    if (!file.f) throw IoError(detail::msg("cannot open ", path.string()));

    PngRead ctx;
    ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!ctx.png) throw IoError("libpng: read struct allocation failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) throw IoError("libpng: info struct allocation failed");

    RawImage img;
    std::vector<uint8_t> buffer;
    std::vector<png_bytep> rows;

    if (setjmp(png_jmpbuf(ctx.png)))
        throw IoError(detail::msg(path.string(), ": PNG decode error"));

    png_init_io(ctx.png, file.f);
    png_read_info(ctx.png, ctx.info);

    const png_byte color_type = png_get_color_type(ctx.png, ctx.info);
    png_byte depth = png_get_bit_depth(ctx.png, ctx.info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(ctx.png);
    if (color_type == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(ctx.png);
    if (png_get_valid(ctx.png, ctx.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(ctx.png);
    if (depth == 16 && std::endian::native == std::endian::little) png_set_swap(ctx.png);
    png_set_interlace_handling(ctx.png);
    png_read_update_info(ctx.png, ctx.info);

    img.height = png_get_image_height(ctx.png, ctx.info);
    img.width = png_get_image_width(ctx.png, ctx.info);
    img.channels = png_get_channels(ctx.png, ctx.info);
    depth = png_get_bit_depth(ctx.png, ctx.info);
    if (depth != 8 && depth != 16)
        throw IoError(detail::msg(path.string(), ": unsupported PNG bit depth ", int(depth)));
    img.bit_depth = depth;

    const size_t rowbytes = png_get_rowbytes(ctx.png, ctx.info);
    buffer.resize(rowbytes * img.height);
    rows.resize(img.height);
    for (size_t r = 0; r < img.height; ++r) rows[r] = buffer.data() + r * rowbytes;
    png_read_image(ctx.png, rows.data());
    png_read_end(ctx.png, nullptr);

    img.pixels.resize(img.height * img.width * img.channels);
    if (depth == 8) {
        for (size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = buffer[i];
    } else {
        std::memcpy(img.pixels.data(), buffer.data(), img.pixels.size() * sizeof(uint16_t));
    }
    return img;
}

void write_png_impl(const fs::path& path, size_t height, size_t width, size_t channels,
                    unsigned depth, const uint8_t* bytes) {
    if (height == 0 || width == 0) throw ConfigError("write_png: empty image");
    int color_type;
    switch (channels) {
        case 1: color_type = PNG_COLOR_TYPE_GRAY; break;
        case 2: color_type = PNG_COLOR_TYPE_GRAY_ALPHA; break;
        case 3: color_type = PNG_COLOR_TYPE_RGB; break;
        case 4: color_type = PNG_COLOR_TYPE_RGBA; break;
        default:
            throw ConfigError(detail::msg("write_png: ", channels, " channels not representable"));
    }

    FileHandle file(path, "wb");
    if (!file.f) throw IoError(detail::msg("cannot create ", path.string()));

    PngWrite ctx;
    ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!ctx.png) throw IoError("libpng: write struct allocation failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) throw IoError("libpng: info struct allocation failed");

    std::vector<png_bytep> rows(height);
    const size_t rowbytes = width * channels * (depth / 8);
    for (size_t r = 0; r < height; ++r)
        rows[r] = const_cast<png_bytep>(bytes + r * rowbytes);

    if (setjmp(png_jmpbuf(ctx.png)))
        throw IoError(detail::msg(path.string(), ": PNG encode error"));

    png_init_io(ctx.png, file.f);
    png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(width),
                 static_cast<png_uint_32>(height), static_cast<int>(depth), color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(ctx.png, ctx.info);
    if (depth == 16 && std::endian::native == std::endian::little) png_set_swap(ctx.png);
    png_write_image(ctx.png, rows.data());
    png_write_end(ctx.png, nullptr);
}

}  // namespace

void write_png8(const fs::path& path, size_t height, size_t width, size_t channels,
                const std::vector<uint8_t>& interleaved) {
    if (interleaved.size() != height * width * channels)
        throw ShapeError(detail::msg("write_png8: buffer size ", interleaved.size(),
                                     " does not match ", height, "x", width, "x", channels));
    write_png_impl(path, height, width, channels, 8, interleaved.data());
}

void write_png16(const fs::path& path, size_t height, size_t width, size_t channels,
                 const std::vector<uint16_t>& interleaved) {
    if (interleaved.size() != height * width * channels)
        throw ShapeError(detail::msg("write_png16: buffer size ", interleaved.size(),
                                     " does not match ", height, "x", width, "x", channels));
    write_png_impl(path, height, width, channels, 16,
                   reinterpret_cast<const uint8_t*>(interleaved.data()));
}

// ---------------------------------------------------------------------------
// TIFF (baseline, uncompressed)
// ---------------------------------------------------------------------------

namespace {

class ByteReader {
public:
    ByteReader(const uint8_t* data, size_t size, bool big_endian)
        : data_(data), size_(size), big_endian_(big_endian) {}

    uint16_t u16_at(size_t off) const {
        check(off, 2);
        return big_endian_ ? static_cast<uint16_t>(data_[off] << 8 | data_[off + 1])
                           : static_cast<uint16_t>(data_[off + 1] << 8 | data_[off]);
    }
    uint32_t u32_at(size_t off) const {
        check(off, 4);
        if (big_endian_)
            return (uint32_t(data_[off]) << 24) | (uint32_t(data_[off + 1]) << 16) |
                   (uint32_t(data_[off + 2]) << 8) | uint32_t(data_[off + 3]);
        return (uint32_t(data_[off + 3]) << 24) | (uint32_t(data_[off + 2]) << 16) |
               (uint32_t(data_[off + 1]) << 8) | uint32_t(data_[off]);
    }
    const uint8_t* raw(size_t off, size_t len) const {
        check(off, len);
        return data_ + off;
    }
    size_t size() const { return size_; }
    bool big_endian() const { return big_endian_; }

private:
    void check(size_t off, size_t len) const {
        if (off + len > size_)
            throw FormatError(detail::msg("TIFF: truncated read of ", len, " bytes"), off);
    }
    const uint8_t* data_;
    size_t size_;
    bool big_endian_;
};

struct TiffEntry {
    uint16_t type = 0;
    uint32_t count = 0;
    size_t value_offset = 0;  // offset of the inline value field itself
};

uint32_t tiff_scalar(const ByteReader& r, const TiffEntry& e, const char* tag) {
    if (e.count != 1) throw FormatError(detail::msg("TIFF: tag ", tag, " has count ", e.count));
    if (e.type == 3) return r.u16_at(e.value_offset);
    if (e.type == 4) return r.u32_at(e.value_offset);
    throw FormatError(detail::msg("TIFF: tag ", tag, " has unsupported type ", e.type));
}

std::vector<uint32_t> tiff_array(const ByteReader& r, const TiffEntry& e, const char* tag) {
    const size_t elem = e.type == 3 ? 2 : 4;
    if (e.type != 3 && e.type != 4)
        throw FormatError(detail::msg("TIFF: tag ", tag, " has unsupported type ", e.type));
    const size_t total = elem * e.count;
    const size_t base = total <= 4 ? e.value_offset : r.u32_at(e.value_offset);
    std::vector<uint32_t> out(e.count);
    for (uint32_t i = 0; i < e.count; ++i)
        out[i] = e.type == 3 ? r.u16_at(base + i * 2) : r.u32_at(base + i * 4);
    return out;
}

RawImage read_tiff_file(const fs::path& path, const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8) throw FormatError("TIFF: file shorter than header", 0);
    const bool big_endian = bytes[0] == 'M';
    ByteReader r(bytes.data(), bytes.size(), big_endian);
    if (r.u16_at(2) != 42) throw FormatError("TIFF: bad magic number", 2);

    const uint32_t ifd = r.u32_at(4);
    const uint16_t entry_count = r.u16_at(ifd);
    std::unordered_map<uint16_t, TiffEntry> entries;
    for (uint16_t i = 0; i < entry_count; ++i) {
        const size_t off = ifd + 2 + i * 12;
        const uint16_t tag = r.u16_at(off);
        entries[tag] = TiffEntry{r.u16_at(off + 2), r.u32_at(off + 4), off + 8};
    }
    auto need = [&](uint16_t tag, const char* name) -> const TiffEntry& {
        auto it = entries.find(tag);
        if (it == entries.end())
            throw FormatError(detail::msg("TIFF: missing required tag ", name), ifd);
        return it->second;
    };

    RawImage img;
    img.width = tiff_scalar(r, need(256, "ImageWidth"), "ImageWidth");
    img.height = tiff_scalar(r, need(257, "ImageLength"), "ImageLength");
    img.channels =
        entries.count(277) ? tiff_scalar(r, entries[277], "SamplesPerPixel") : 1;

    const uint32_t compression =
        entries.count(259) ? tiff_scalar(r, entries[259], "Compression") : 1;
    if (compression != 1)
        throw IoError(detail::msg(path.string(), ": compressed TIFF (compression=", compression,
                                  ") is not supported; only baseline uncompressed"));
    if (entries.count(284) && tiff_scalar(r, entries[284], "PlanarConfig") != 1)
        throw IoError(detail::msg(path.string(), ": planar TIFF is not supported"));

    unsigned depth = 8;
    if (entries.count(258)) {
        const auto bits = tiff_array(r, entries[258], "BitsPerSample");
        depth = bits.empty() ? 8 : bits[0];
        for (uint32_t b : bits)
            if (b != depth) throw IoError(detail::msg(path.string(), ": mixed bits per sample"));
    }
    if (depth != 8 && depth != 16)
        throw IoError(detail::msg(path.string(), ": unsupported TIFF bit depth ", depth));
    img.bit_depth = depth;

    const auto strip_offsets = tiff_array(r, need(273, "StripOffsets"), "StripOffsets");
    const auto strip_counts = tiff_array(r, need(279, "StripByteCounts"), "StripByteCounts");
    if (strip_offsets.size() != strip_counts.size())
        throw FormatError("TIFF: strip offset/count tables differ in length", ifd);

    const size_t samples = img.height * img.width * img.channels;
    img.pixels.resize(samples);
    const size_t bytes_per_sample = depth / 8;
    size_t sample = 0;
    for (size_t s = 0; s < strip_offsets.size(); ++s) {
        const uint8_t* src = r.raw(strip_offsets[s], strip_counts[s]);
        const size_t strip_samples = strip_counts[s] / bytes_per_sample;
        if (sample + strip_samples > samples)
            throw FormatError("TIFF: strips exceed the declared image size", strip_offsets[s]);
        for (size_t i = 0; i < strip_samples; ++i) {
            if (depth == 8)
                img.pixels[sample + i] = src[i];
            else
                img.pixels[sample + i] =
                    big_endian ? static_cast<uint16_t>(src[2 * i] << 8 | src[2 * i + 1])
                               : static_cast<uint16_t>(src[2 * i + 1] << 8 | src[2 * i]);
        }
        sample += strip_samples;
    }
    if (sample != samples)
        throw FormatError(detail::msg("TIFF: strips cover ", sample, " samples, expected ",
                                      samples), 0);
    return img;
}

void put_u16le(std::vector<uint8_t>& b, uint16_t v) {
    b.push_back(v & 0xFF);
    b.push_back(v >> 8);
}
void put_u32le(std::vector<uint8_t>& b, uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xFF);
}
void put_u64le(std::vector<uint8_t>& b, uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back((v >> (8 * i)) & 0xFF);
}

void write_file(const fs::path& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(detail::msg("cannot create ", path.string()));
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(detail::msg("write failed for ", path.string()));
}

std::vector<uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError(detail::msg("cannot open ", path.string()));
    const auto size = in.tellg();
    in.seekg(0);
    std::vector<uint8_t> bytes(static_cast<size_t>(size));
    in.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!in) throw IoError(detail::msg("read failed for ", path.string()));
    return bytes;
}

}  // namespace

void write_tiff(const fs::path& path, size_t height, size_t width, size_t channels,
                unsigned bit_depth, const std::vector<uint16_t>& interleaved) {
    if (bit_depth != 8 && bit_depth != 16)
        throw ConfigError(detail::msg("write_tiff: bit depth ", bit_depth, " not in {8, 16}"));
    if (interleaved.size() != height * width * channels)
        throw ShapeError(detail::msg("write_tiff: buffer size ", interleaved.size(),
                                     " does not match ", height, "x", width, "x", channels));

    std::vector<uint8_t> out;
    out.reserve(interleaved.size() * (bit_depth / 8) + 256);
    out.push_back('I');
    out.push_back('I');
    put_u16le(out, 42);
    const size_t ifd_offset_pos = out.size();
    put_u32le(out, 0);  // patched below

    const size_t data_offset = out.size();
    for (uint16_t v : interleaved) {
        if (bit_depth == 8)
            out.push_back(static_cast<uint8_t>(v & 0xFF));
        else
            put_u16le(out, v);
    }
    const uint32_t data_bytes = static_cast<uint32_t>(out.size() - data_offset);

    // BitsPerSample array lives right after the pixel data when it cannot be
    // stored inline (more than two channels).
    size_t bits_offset = 0;
    if (channels > 2) {
        bits_offset = out.size();
        for (size_t i = 0; i < channels; ++i) put_u16le(out, static_cast<uint16_t>(bit_depth));
    }

    const uint32_t ifd = static_cast<uint32_t>(out.size());
    std::memcpy(out.data() + ifd_offset_pos, &ifd, sizeof(uint32_t));

    struct Tag {
        uint16_t tag, type;
        uint32_t count, value;
    };
    std::vector<Tag> tags;
    tags.push_back({256, 4, 1, static_cast<uint32_t>(width)});
    tags.push_back({257, 4, 1, static_cast<uint32_t>(height)});
    if (channels > 2)
        tags.push_back({258, 3, static_cast<uint32_t>(channels), static_cast<uint32_t>(bits_offset)});
    else if (channels == 2)
        tags.push_back({258, 3, 2, static_cast<uint32_t>(bit_depth) | (static_cast<uint32_t>(bit_depth) << 16)});
    else
        tags.push_back({258, 3, 1, static_cast<uint32_t>(bit_depth)});
    tags.push_back({259, 3, 1, 1});                                   // uncompressed
    tags.push_back({262, 3, 1, channels >= 3 ? 2u : 1u});             // photometric
    tags.push_back({273, 4, 1, static_cast<uint32_t>(data_offset)});  // single strip
    tags.push_back({277, 3, 1, static_cast<uint32_t>(channels)});
    tags.push_back({278, 4, 1, static_cast<uint32_t>(height)});
    tags.push_back({279, 4, 1, data_bytes});
    tags.push_back({284, 3, 1, 1});

    put_u16le(out, static_cast<uint16_t>(tags.size()));
    for (const auto& t : tags) {
        put_u16le(out, t.tag);
        put_u16le(out, t.type);
        put_u32le(out, t.count);
        put_u32le(out, t.value);
    }
    put_u32le(out, 0);  // no next IFD
    write_file(path, out);
}

// ---------------------------------------------------------------------------
// scenes
// ---------------------------------------------------------------------------

RawImage read_image(const fs::path& path) {
    const auto bytes = read_file(path);
    static const uint8_t png_sig[4] = {0x89, 'P', 'N', 'G'};
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), png_sig, 4) == 0) return read_png_file(path);
    if (bytes.size() >= 4 && ((bytes[0] == 'I' && bytes[1] == 'I') ||
                              (bytes[0] == 'M' && bytes[1] == 'M')))
        return read_tiff_file(path, bytes);
    throw IoError(detail::msg(path.string(),
                              ": unrecognized image format (expected PNG or TIFF signature)"));
}

Scene scene_from_image(const RawImage& image, bool normalize) {
    Scene scene;
    scene.bands = image.channels;
    scene.height = image.height;
    scene.width = image.width;
    scene.data.resize(image.channels * image.height * image.width);
    scene.norm_stats.resize(image.channels);

    const size_t plane = scene.plane();
    for (size_t b = 0; b < scene.bands; ++b) {
        float* dst = scene.data.data() + b * plane;
        double sum = 0.0;
        for (size_t i = 0; i < plane; ++i) {
            const float v = static_cast<float>(image.pixels[i * image.channels + b]);
            dst[i] = v;
            sum += v;
        }
        const double mean = sum / static_cast<double>(plane);
        double sq = 0.0;
        for (size_t i = 0; i < plane; ++i) {
            const double d = dst[i] - mean;
            sq += d * d;
        }
        const double std = std::sqrt(sq / static_cast<double>(plane));
        scene.norm_stats[b] = {mean, std};
        if (normalize) {
            if (std < 1e-12) {
                std::fill(dst, dst + plane, 0.0f);  // constant band
            } else {
                const float fmean = static_cast<float>(mean);
                const float inv = static_cast<float>(1.0 / std);
                for (size_t i = 0; i < plane; ++i) dst[i] = (dst[i] - fmean) * inv;
            }
        }
    }
    scene.normalized = normalize;
    return scene;
}

Scene load_scene(const fs::path& path, bool normalize) {
    return scene_from_image(read_image(path), normalize);
}

Scene denormalize(const Scene& scene) {
    if (!scene.normalized) return scene;
    Scene out = scene;
    const size_t plane = scene.plane();
    for (size_t b = 0; b < scene.bands; ++b) {
        const auto& st = scene.norm_stats[b];
        float* dst = out.data.data() + b * plane;
        for (size_t i = 0; i < plane; ++i)
            dst[i] = static_cast<float>(dst[i] * st.std + st.mean);
    }
    out.normalized = false;
    return out;
}

// ---------------------------------------------------------------------------
// segmentation maps and references
// ---------------------------------------------------------------------------

void write_segmentation(const SegmentationMap& map, const Palette& palette,
                        const std::optional<std::vector<int32_t>>& cluster_to_class,
                        const fs::path& path) {
    const Palette fallback = fallback_palette();
    std::vector<uint8_t> rgb(map.height * map.width * 3);
    for (size_t i = 0; i < map.labels.size(); ++i) {
        const int32_t cluster = map.labels[i];
        const std::array<uint8_t, 3>* color;
        if (cluster_to_class) {
            if (cluster < 0 || static_cast<size_t>(cluster) >= cluster_to_class->size() ||
                (*cluster_to_class)[cluster] < 0)
                throw ContractError(detail::msg("write_segmentation: cluster ", cluster,
                                                " present in map but not covered by the mapping"));
            const int32_t cls = (*cluster_to_class)[cluster];
            if (static_cast<size_t>(cls) >= palette.size())
                throw ContractError(detail::msg("write_segmentation: mapped class ", cls,
                                                " outside the palette (", palette.size(),
                                                " entries)"));
            color = &palette.entries[cls].rgb;
        } else {
            color = &fallback.entries[static_cast<size_t>(cluster) % fallback.size()].rgb;
        }
        rgb[i * 3] = (*color)[0];
        rgb[i * 3 + 1] = (*color)[1];
        rgb[i * 3 + 2] = (*color)[2];
    }
    write_png8(path, map.height, map.width, 3, rgb);
}

ReferenceMap read_reference(const fs::path& path, const Palette& palette) {
    const RawImage img = read_image(path);
    if (img.channels < 3)
        throw IoError(detail::msg(path.string(), ": reference must be RGB, has ", img.channels,
                                  " channels"));
    if (img.bit_depth != 8)
        throw IoError(detail::msg(path.string(), ": reference must be 8-bit, is ", img.bit_depth,
                                  "-bit"));
    palette.validate();

    std::unordered_map<uint32_t, int32_t> lookup;
    for (size_t i = 0; i < palette.size(); ++i) {
        const auto& c = palette.entries[i].rgb;
        lookup[uint32_t(c[0]) << 16 | uint32_t(c[1]) << 8 | c[2]] = static_cast<int32_t>(i);
    }

    ReferenceMap ref;
    ref.height = img.height;
    ref.width = img.width;
    ref.num_classes = palette.size();
    ref.labels.resize(img.height * img.width);
    size_t ignored = 0;
    for (size_t i = 0; i < ref.labels.size(); ++i) {
        const uint32_t key = uint32_t(img.pixels[i * img.channels]) << 16 |
                             uint32_t(img.pixels[i * img.channels + 1]) << 8 |
                             uint32_t(img.pixels[i * img.channels + 2]);
        const auto it = lookup.find(key);
        if (it == lookup.end()) {
            ref.labels[i] = ReferenceMap::kIgnore;
            ++ignored;
        } else {
            ref.labels[i] = it->second;
        }
    }
    ref.palette_warning = ignored * 2 > ref.labels.size();
    return ref;
}

// ---------------------------------------------------------------------------
// model files
// ---------------------------------------------------------------------------

namespace {

void put_f32(std::vector<uint8_t>& b, float v) { put_u32le(b, std::bit_cast<uint32_t>(v)); }

void put_tensor(std::vector<uint8_t>& b, const std::vector<size_t>& dims,
                const std::vector<float>& data) {
    put_u32le(b, static_cast<uint32_t>(dims.size()));
    size_t count = 1;
    for (size_t d : dims) {
        put_u32le(b, static_cast<uint32_t>(d));
        count *= d;
    }
    if (count != data.size())
        throw ShapeError(detail::msg("save_model: tensor payload ", data.size(),
                                     " does not match declared dims product ", count));
    for (float v : data) put_f32(b, v);
}

class ModelReader {
public:
    explicit ModelReader(std::vector<uint8_t> bytes) : bytes_(std::move(bytes)) {}

    uint32_t u32(const char* what) {
        check(4, what);
        uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | bytes_[pos_ + i];
        pos_ += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        check(8, what);
        uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | bytes_[pos_ + i];
        pos_ += 8;
        return v;
    }

    std::vector<float> tensor(const std::vector<size_t>& want_dims, const char* what) {
        const uint32_t rank = u32(what);
        if (rank != want_dims.size())
            throw FormatError(detail::msg("model file: ", what, ": rank ", rank, ", expected ",
                                          want_dims.size()), pos_ - 4);
        size_t count = 1;
        for (size_t d = 0; d < rank; ++d) {
            const uint32_t dim = u32(what);
            if (want_dims[d] != 0 && dim != want_dims[d])
                throw FormatError(detail::msg("model file: ", what, ": dim ", d, " is ", dim,
                                              ", expected ", want_dims[d]), pos_ - 4);
            if (dim == 0)
                throw FormatError(detail::msg("model file: ", what, ": zero dim"), pos_ - 4);
            count *= dim;
        }
        check(count * 4, what);
        std::vector<float> data(count);
        std::memcpy(data.data(), bytes_.data() + pos_, count * 4);
        if constexpr (std::endian::native != std::endian::little) {
            for (auto& v : data) {
                uint32_t bits = std::bit_cast<uint32_t>(v);
                bits = __builtin_bswap32(bits);
                v = std::bit_cast<float>(bits);
            }
        }
        pos_ += count * 4;
        return data;
    }

    size_t pos() const { return pos_; }
    size_t remaining() const { return bytes_.size() - pos_; }

private:
    void check(size_t len, const char* what) {
        if (pos_ + len > bytes_.size())
            throw FormatError(detail::msg("model file: truncated while reading ", what), pos_);
    }
    std::vector<uint8_t> bytes_;
    size_t pos_ = 0;
};

}  // namespace

void save_model(const ModelParams& params, const fs::path& path) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kModelMagic.begin(), kModelMagic.end());
    put_u32le(out, kModelVersion);
    put_u32le(out, static_cast<uint32_t>(params.feature_count));
    put_u32le(out, static_cast<uint32_t>(params.attention_ratio));
    put_u64le(out, params.seed);
    put_u64le(out, params.config_digest);
    put_u32le(out, params.stats_initialized() ? 1 : 0);

    for (size_t i = 0; i < kConvBlocks; ++i) {
        const auto& blk = params.blocks[i];
        const auto& ws = blk.weights.shape();
        put_tensor(out, {ws[0], ws[1], ws[2], ws[3]}, blk.weights.values());
        put_tensor(out, {blk.bias.size()}, blk.bias);
        put_tensor(out, {blk.gamma.size()}, blk.gamma);
        put_tensor(out, {blk.beta.size()}, blk.beta);
        put_tensor(out, {blk.bn.running_mean.size()}, blk.bn.running_mean);
        put_tensor(out, {blk.bn.running_var.size()}, blk.bn.running_var);
    }
    const auto& att = params.attention;
    put_tensor(out, {att.fc1_weights.n(), att.fc1_weights.c()}, att.fc1_weights.values());
    put_tensor(out, {att.fc1_bias.size()}, att.fc1_bias);
    put_tensor(out, {att.fc2_weights.n(), att.fc2_weights.c()}, att.fc2_weights.values());
    put_tensor(out, {att.fc2_bias.size()}, att.fc2_bias);
    const auto& ps = params.proj_weights.shape();
    put_tensor(out, {ps[0], ps[1], ps[2], ps[3]}, params.proj_weights.values());
    put_tensor(out, {params.proj_bias.size()}, params.proj_bias);

    write_file(path, out);
}

ModelParams load_model(const fs::path& path) {
    ModelReader r(read_file(path));

    const uint32_t magic = r.u32("magic");
    const uint32_t want_magic = uint32_t(kModelMagic[0]) | uint32_t(kModelMagic[1]) << 8 |
                                uint32_t(kModelMagic[2]) << 16 | uint32_t(kModelMagic[3]) << 24;
    if (magic != want_magic) throw FormatError("model file: bad magic (not an SSEG file)", 0);
    const uint32_t version = r.u32("version");
    if (version != kModelVersion)
        throw FormatError(detail::msg("model file: unsupported version ", version), 4);

    ModelParams p;
    p.feature_count = r.u32("K");
    p.attention_ratio = r.u32("r");
    if (p.feature_count < 2) throw FormatError("model file: K < 2", 8);
    if (p.attention_ratio == 0 || kWidth % p.attention_ratio != 0)
        throw FormatError(detail::msg("model file: attention ratio ", p.attention_ratio,
                                      " does not divide ", kWidth), 12);
    p.seed = r.u64("seed");
    p.config_digest = r.u64("config digest");
    const uint32_t stats_init = r.u32("stats flag");
    if (stats_init > 1)
        throw FormatError(detail::msg("model file: stats flag ", stats_init, " not 0/1"), r.pos() - 4);

    for (size_t i = 0; i < kConvBlocks; ++i) {
        auto& blk = p.blocks[i];
        const size_t want_in = i == 0 ? 0 : kWidth;  // 0: wildcard, first block carries the bands
        auto w = r.tensor({kWidth, want_in, 3, 3}, "conv weights");
        const size_t in_c = w.size() / (kWidth * 9);
        blk.weights = Tensor({kWidth, in_c, 3, 3}, std::move(w));
        if (i == 0) p.input_bands = in_c;
        blk.bias = r.tensor({kWidth}, "conv bias");
        blk.gamma = r.tensor({kWidth}, "gamma");
        blk.beta = r.tensor({kWidth}, "beta");
        blk.bn.running_mean = r.tensor({kWidth}, "running mean");
        blk.bn.running_var = r.tensor({kWidth}, "running var");
        blk.bn.initialized = stats_init == 1;
    }
    const size_t hidden = kWidth / p.attention_ratio;
    p.attention.fc1_weights = Tensor({hidden, kWidth, 1, 1}, r.tensor({hidden, kWidth}, "fc1 weights"));
    p.attention.fc1_bias = r.tensor({hidden}, "fc1 bias");
    p.attention.fc2_weights = Tensor({kWidth, hidden, 1, 1}, r.tensor({kWidth, hidden}, "fc2 weights"));
    p.attention.fc2_bias = r.tensor({kWidth}, "fc2 bias");
    p.proj_weights = Tensor({p.feature_count, kWidth, 1, 1},
                            r.tensor({p.feature_count, kWidth, 1, 1}, "projection weights"));
    p.proj_bias = r.tensor({p.feature_count}, "projection bias");

    if (r.remaining() != 0)
        throw FormatError(detail::msg("model file: ", r.remaining(), " trailing bytes"), r.pos());
    return p;
}

}  // namespace sceneseg
