#include "partmim/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "json.hpp"
#include "partmim/config.hpp"
#include "partmim/error.hpp"

namespace partmim {

namespace {

using nlohmann::json;

std::string line_error(std::size_t line, const std::string& field, const std::string& what) {
    return "line " + std::to_string(line) + ": field '" + field + "': " + what;
}

// --- synthetic specs -------------------------------------------------------

json spec_to_json(const SyntheticSpec& s) {
    return {{"height", s.height},
            {"width", s.width},
            {"neck_x", s.neck_x},
            {"neck_y", s.neck_y},
            {"scale", s.scale},
            {"limb_angles", s.limb_angles},
            {"background", s.background},
            {"foreground", s.foreground},
            {"noise", s.noise},
            {"keypoint_dropout", s.keypoint_dropout},
            {"seed", s.seed}};
}

SyntheticSpec spec_from_json(const json& j) {
    SyntheticSpec s;
    if (!j.is_object()) throw FormatError("synthetic spec must be an object");
    static const std::set<std::string> known = {
        "height", "width",      "neck_x", "neck_y",           "scale", "limb_angles",
        "background", "foreground", "noise", "keypoint_dropout", "seed"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw FormatError("unknown synthetic spec key '" + it.key() + "'");
    auto get = [&](const char* key, auto& out) {
        if (j.contains(key)) j.at(key).get_to(out);
    };
    get("height", s.height);
    get("width", s.width);
    get("neck_x", s.neck_x);
    get("neck_y", s.neck_y);
    get("scale", s.scale);
    get("limb_angles", s.limb_angles);
    get("background", s.background);
    get("foreground", s.foreground);
    get("noise", s.noise);
    get("keypoint_dropout", s.keypoint_dropout);
    get("seed", s.seed);
    return s;
}

struct Segment {
    Joint a;
    Joint b;
};

constexpr std::array<Segment, 16> kSkeleton = {{
    {Joint::nose, Joint::left_eye},
    {Joint::nose, Joint::right_eye},
    {Joint::left_eye, Joint::left_ear},
    {Joint::right_eye, Joint::right_ear},
    {Joint::left_shoulder, Joint::right_shoulder},
    {Joint::left_shoulder, Joint::left_hip},
    {Joint::right_shoulder, Joint::right_hip},
    {Joint::left_hip, Joint::right_hip},
    {Joint::left_shoulder, Joint::left_elbow},
    {Joint::left_elbow, Joint::left_wrist},
    {Joint::right_shoulder, Joint::right_elbow},
    {Joint::right_elbow, Joint::right_wrist},
    {Joint::left_hip, Joint::left_knee},
    {Joint::left_knee, Joint::left_ankle},
    {Joint::right_hip, Joint::right_knee},
    {Joint::right_knee, Joint::right_ankle},
}};

double segment_distance(double px, double py, const Keypoint& a, const Keypoint& b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = a.x + t * dx - px, ey = a.y + t * dy - py;
    return std::sqrt(ex * ex + ey * ey);
}

// --- little-endian binary helpers -----------------------------------------

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
public:
    explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

    std::uint64_t u(int width) {
        need(static_cast<std::size_t>(width));
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(width);
        return v;
    }
    std::uint32_t u32() { return static_cast<std::uint32_t>(u(4)); }
    std::uint64_t u64() { return u(8); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw FormatError("checkpoint is truncated");
    }

    const std::string& bytes_;
    std::size_t pos_ = 0;
};

void put_array(std::string& out, const std::string& name, const Mat& m, int rank) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(rank));
    if (rank == 2) put_u64(out, static_cast<std::uint64_t>(m.rows()));
    put_u64(out, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index k = 0; k < m.size(); ++k) put_u64(out, std::bit_cast<std::uint64_t>(m.data()[k]));
}

// PNM header token reader (skips whitespace and comments).
class PnmHeader {
public:
    explicit PnmHeader(const std::string& bytes) : b_(bytes) {}

    int next_int() {
        skip();
        std::size_t start = pos_;
        while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) ++pos_;
        if (start == pos_) throw FormatError("malformed PNM header");
        if (pos_ - start > 9) throw FormatError("PNM header value is too large");
        return std::stoi(b_.substr(start, pos_ - start));
    }
    std::size_t data_start() {
        if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_])))
            throw FormatError("malformed PNM header");
        return pos_ + 1;
    }

private:
    void skip() {
        while (pos_ < b_.size()) {
            if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
                ++pos_;
            } else if (b_[pos_] == '#') {
                while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    const std::string& b_;
    std::size_t pos_ = 2;
};

}  // namespace

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

// --- manifests -------------------------------------------------------------

DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir) {
    DatasetManifest m;
    m.base_dir = base_dir;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    bool first = true;
    std::set<std::string> ids;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw FormatError("line " + std::to_string(line_no) + ": not a JSON object");
        if (first && j.contains("format")) {
            first = false;
            if (j["format"] != "partmim-manifest")
                throw FormatError(line_error(line_no, "format", "expected \"partmim-manifest\""));
            m.format_version = j.value("version", 0);
            if (m.format_version != DatasetManifest::kFormatVersion)
                throw FormatError(line_error(line_no, "version",
                                             "unsupported manifest version " +
                                                 std::to_string(m.format_version)));
            m.image_height = j.value("height", 0);
            m.image_width = j.value("width", 0);
            continue;
        }
        first = false;
        SampleRecord rec;
        if (!j.contains("id") || !j["id"].is_string())
            throw FormatError(line_error(line_no, "id", "missing or not a string"));
        rec.id = j["id"].get<std::string>();
        if (!ids.insert(rec.id).second)
            throw FormatError(line_error(line_no, "id", "duplicate id '" + rec.id + "'"));
        if (!j.contains("image"))
            throw FormatError(line_error(line_no, "image", "missing"));
        const json& img = j["image"];
        if (img.is_string()) {
            rec.image = img.get<std::string>();
        } else if (img.is_object() && img.contains("synthetic")) {
            try {
                rec.image = spec_from_json(img["synthetic"]);
            } catch (const std::exception& e) {
                throw FormatError(line_error(line_no, "image.synthetic", e.what()));
            }
        } else {
            throw FormatError(line_error(line_no, "image", "expected a path or {\"synthetic\": {...}}"));
        }
        if (!j.contains("keypoints") || !j["keypoints"].is_array())
            throw FormatError(line_error(line_no, "keypoints", "missing or not an array"));
        const json& kps = j["keypoints"];
        if (kps.size() != kNumKeypoints)
            throw FormatError(line_error(line_no, "keypoints",
                                         "expected 17 keypoints, got " + std::to_string(kps.size())));
        for (std::size_t k = 0; k < kNumKeypoints; ++k) {
            const std::string field = "keypoints[" + std::to_string(k) + "]";
            const json& t = kps[k];
            if (!t.is_array() || t.size() != 3)
                throw FormatError(line_error(line_no, field, "expected [x, y, confidence]"));
            for (std::size_t c = 0; c < 3; ++c)
                if (!t[c].is_number())
                    throw FormatError(line_error(line_no, field + "[" + std::to_string(c) + "]",
                                                 "not a number"));
            Keypoint kp{t[0].get<double>(), t[1].get<double>(), t[2].get<double>()};
            if (!std::isfinite(kp.x) || !std::isfinite(kp.y) || !std::isfinite(kp.confidence))
                throw FormatError(line_error(line_no, field, "non-finite value"));
            if (kp.confidence < 0.0 || kp.confidence > 1.0)
                throw FormatError(line_error(line_no, field + "[2]", "confidence outside [0, 1]"));
            rec.keypoints[k] = kp;
        }
        for (auto it = j.begin(); it != j.end(); ++it)
            if (it.key() != "id" && it.key() != "image" && it.key() != "keypoints")
                throw FormatError(line_error(line_no, it.key(), "unknown field"));
        m.records.push_back(std::move(rec));
    }
    if (m.records.empty()) throw FormatError("empty manifest");
    return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw ConfigError("manifest '" + path.string() + "' does not exist");
    try {
        return parse_manifest(read_file(path), path.parent_path());
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    std::string out;
    json header = {{"format", "partmim-manifest"},
                   {"version", manifest.format_version},
                   {"height", manifest.image_height},
                   {"width", manifest.image_width}};
    out += header.dump() + "\n";
    for (const auto& rec : manifest.records) {
        json j;
        j["id"] = rec.id;
        if (const auto* p = std::get_if<std::string>(&rec.image))
            j["image"] = *p;
        else
            j["image"] = {{"synthetic", spec_to_json(std::get<SyntheticSpec>(rec.image))}};
        json kps = json::array();
        for (const auto& k : rec.keypoints) kps.push_back({k.x, k.y, k.confidence});
        j["keypoints"] = kps;
        out += j.dump() + "\n";
    }
    write_file(path, out);
}

// --- images ----------------------------------------------------------------

ImageBuffer decode_pnm(const std::string& bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
        throw FormatError("unsupported image format (supported: binary PPM 'P6', binary PGM 'P5')");
    const int channels = bytes[1] == '6' ? 3 : 1;
    PnmHeader header(bytes);
    const int width = header.next_int();
    const int height = header.next_int();
    const int maxval = header.next_int();
    if (width <= 0 || height <= 0) throw FormatError("PNM image has zero size");
    if (maxval <= 0 || maxval > 65535) throw FormatError("PNM maxval out of range");
    const std::size_t start = header.data_start();
    const std::size_t bps = maxval > 255 ? 2 : 1;
    const std::size_t count = static_cast<std::size_t>(width) * height * channels;
    if (bytes.size() < start || (bytes.size() - start) / bps < count)
        throw FormatError("PNM pixel data is truncated");
    ImageBuffer img(height, width);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + start);
    for (std::size_t i = 0; i < static_cast<std::size_t>(width) * height; ++i) {
        for (int c = 0; c < 3; ++c) {
            const std::size_t src = i * channels + (channels == 3 ? c : 0);
            const unsigned v = bps == 1 ? p[src] : (p[2 * src] << 8) | p[2 * src + 1];
            img.data[i * 3 + c] = static_cast<double>(v) / maxval;
        }
    }
    return img;
}

ImageBuffer load_image(const std::filesystem::path& path) {
    try {
        return decode_pnm(read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

std::string encode_ppm(const ImageBuffer& image) {
    std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                      "\n255\n";
    out.reserve(out.size() + image.data.size());
    for (double v : image.data) {
        const double c = std::clamp(std::isnan(v) ? 0.0 : v, 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::floor(c * 255.0 + 0.5))));
    }
    return out;
}

void write_ppm(const ImageBuffer& image, const std::filesystem::path& path) {
    write_file(path, encode_ppm(image));
}

ImageBuffer resolve_image(const SampleRecord& record, const std::filesystem::path& base_dir) {
    if (const auto* spec = std::get_if<SyntheticSpec>(&record.image))
        return render_synthetic(*spec).image;
    std::filesystem::path p = std::get<std::string>(record.image);
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    return load_image(p);
}

// --- synthetic figures -----------------------------------------------------

KeypointSet synthetic_keypoints(const SyntheticSpec& s) {
    KeypointSet k{};
    auto set = [&](Joint j, double x, double y) { k[static_cast<std::size_t>(j)] = {x, y, 1.0}; };
    const double u = s.scale;
    const double nx = s.neck_x, ny = s.neck_y;
    set(Joint::nose, nx, ny - 0.55 * u);
    set(Joint::left_eye, nx + 0.12 * u, ny - 0.65 * u);
    set(Joint::right_eye, nx - 0.12 * u, ny - 0.65 * u);
    set(Joint::left_ear, nx + 0.25 * u, ny - 0.58 * u);
    set(Joint::right_ear, nx - 0.25 * u, ny - 0.58 * u);
    set(Joint::left_shoulder, nx + 0.4 * u, ny);
    set(Joint::right_shoulder, nx - 0.4 * u, ny);
    set(Joint::left_hip, nx + 0.25 * u, ny + u);
    set(Joint::right_hip, nx - 0.25 * u, ny + u);

    // side = +1 for the figure's left (image right in a frontal view).
    auto limb = [&](Joint from, Joint to, double length, double angle, double side) {
        const Keypoint& a = k[static_cast<std::size_t>(from)];
        set(to, a.x + side * length * std::sin(angle), a.y + length * std::cos(angle));
    };
    const auto& a = s.limb_angles;
    limb(Joint::left_shoulder, Joint::left_elbow, 0.6 * u, a[0], 1.0);
    limb(Joint::right_shoulder, Joint::right_elbow, 0.6 * u, a[1], -1.0);
    limb(Joint::left_elbow, Joint::left_wrist, 0.55 * u, a[2], 1.0);
    limb(Joint::right_elbow, Joint::right_wrist, 0.55 * u, a[3], -1.0);
    limb(Joint::left_hip, Joint::left_knee, 0.75 * u, a[4], 1.0);
    limb(Joint::right_hip, Joint::right_knee, 0.75 * u, a[5], -1.0);
    limb(Joint::left_knee, Joint::left_ankle, 0.7 * u, a[6], 1.0);
    limb(Joint::right_knee, Joint::right_ankle, 0.7 * u, a[7], -1.0);
    return k;
}

RenderedFigure render_synthetic(const SyntheticSpec& s) {
    if (s.height <= 0 || s.width <= 0) throw ConfigError("synthetic canvas must be non-empty");
    RenderedFigure fig;
    fig.keypoints = synthetic_keypoints(s);
    for (const auto& kp : fig.keypoints) {
        if (!(kp.x >= 0.5 && kp.x <= s.width - 0.5 && kp.y >= 0.5 && kp.y <= s.height - 0.5))
            throw ConfigError("synthetic figure leaves the " + std::to_string(s.height) + "x" +
                              std::to_string(s.width) + " canvas");
    }
    fig.image = ImageBuffer(s.height, s.width);
    Rng noise_rng(derive_seed({s.seed, 0}));
    for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
            bool on = false;
            for (const auto& seg : kSkeleton) {
                if (segment_distance(x + 0.5, y + 0.5, fig.keypoints[static_cast<std::size_t>(seg.a)],
                                     fig.keypoints[static_cast<std::size_t>(seg.b)]) <= 0.75) {
                    on = true;
                    break;
                }
            }
            const auto& color = on ? s.foreground : s.background;
            for (int c = 0; c < 3; ++c) {
                double v = color[static_cast<std::size_t>(c)];
                if (s.noise > 0.0) v += s.noise * noise_rng.normal();
                fig.image.at(y, x, c) = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    if (s.keypoint_dropout > 0.0) {
        Rng drop_rng(derive_seed({s.seed, 1}));
        for (auto& kp : fig.keypoints)
            if (drop_rng.bernoulli(s.keypoint_dropout)) kp.confidence = 0.0;
    }
    return fig;
}

SyntheticSpec random_synthetic_spec(Rng& rng, int height, int width, double noise) {
    SyntheticSpec s;
    s.height = height;
    s.width = width;
    s.noise = noise;
    s.seed = rng.next_u64();
    for (int attempt = 0; attempt < 1000; ++attempt) {
        const double shrink = attempt < 200 ? 1.0 : 0.7;
        s.scale = rng.uniform(0.16, 0.24) * height * shrink;
        s.neck_x = rng.uniform(0.35, 0.65) * width;
        s.neck_y = rng.uniform(0.2, 0.4) * height;
        auto& a = s.limb_angles;
        a[0] = rng.uniform(0.1, 1.3);
        a[1] = rng.uniform(0.1, 1.3);
        a[2] = a[0] + rng.uniform(-0.6, 0.9);
        a[3] = a[1] + rng.uniform(-0.6, 0.9);
        a[4] = rng.uniform(0.0, 0.45);
        a[5] = rng.uniform(0.0, 0.45);
        a[6] = a[4] + rng.uniform(-0.3, 0.3);
        a[7] = a[5] + rng.uniform(-0.3, 0.3);
        for (int c = 0; c < 3; ++c) {
            s.background[static_cast<std::size_t>(c)] = rng.uniform(0.0, 0.35);
            s.foreground[static_cast<std::size_t>(c)] = rng.uniform(0.65, 1.0);
        }
        const auto k = synthetic_keypoints(s);
        const bool inside = std::all_of(k.begin(), k.end(), [&](const Keypoint& p) {
            return p.x >= 1.0 && p.x <= width - 1.0 && p.y >= 1.0 && p.y <= height - 1.0;
        });
        if (inside) return s;
    }
    throw ConfigError("could not place a synthetic figure on a " + std::to_string(height) + "x" +
                      std::to_string(width) + " canvas");
}

SyntheticDataset generate_synthetic(const std::vector<SyntheticSpec>& specs) {
    SyntheticDataset out;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        RenderedFigure fig = render_synthetic(specs[i]);
        SampleRecord rec;
        rec.id = "synth_" + std::to_string(i);
        rec.image = specs[i];
        rec.keypoints = fig.keypoints;
        out.manifest.records.push_back(std::move(rec));
        out.images.push_back(std::move(fig.image));
    }
    if (!specs.empty()) {
        out.manifest.image_height = specs.front().height;
        out.manifest.image_width = specs.front().width;
    }
    return out;
}

DatasetManifest write_synthetic_dataset(const SyntheticDataset& data,
                                        const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    DatasetManifest m = data.manifest;
    m.base_dir = dir;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        const std::string rel = "images/" + m.records[i].id + ".ppm";
        write_ppm(data.images[i], dir / rel);
        m.records[i].image = rel;
    }
    write_manifest(m, dir / "manifest.jsonl");
    return m;
}

// --- checkpoints -----------------------------------------------------------

std::string encode_checkpoint(const Checkpoint& ckpt) {
    std::string out = "PMIM";
    put_u32(out, kCheckpointVersion);
    put_u64(out, ckpt.config_json.size());
    out += ckpt.config_json;
    put_u64(out, ckpt.step);
    put_u64(out, ckpt.opt.step);
    const auto& p = ckpt.params;
    const bool has_opt = ckpt.opt.first_moment.size() == p.size();
    put_u64(out, p.size() * (has_opt ? 3 : 1) + 1);
    Mat hyper(1, 3);
    hyper << ckpt.opt.beta1, ckpt.opt.beta2, ckpt.opt.eps;
    put_array(out, "opt.hyper", hyper, 1);
    for (std::size_t i = 0; i < p.size(); ++i) put_array(out, p.info[i].name, p[i], p.info[i].rank);
    if (has_opt) {
        for (std::size_t i = 0; i < p.size(); ++i)
            put_array(out, "opt.m:" + p.info[i].name, ckpt.opt.first_moment[i], p.info[i].rank);
        for (std::size_t i = 0; i < p.size(); ++i)
            put_array(out, "opt.v:" + p.info[i].name, ckpt.opt.second_moment[i], p.info[i].rank);
    }
    return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
    ByteReader r(bytes);
    if (bytes.size() < 4 || r.str(4) != "PMIM") throw FormatError("not a checkpoint (bad magic)");
    const auto version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    Checkpoint ckpt;
    const auto cfg_len = r.u64();
    if (cfg_len > bytes.size()) throw FormatError("checkpoint is truncated");
    ckpt.config_json = r.str(static_cast<std::size_t>(cfg_len));
    const json cfg = json::parse(ckpt.config_json, nullptr, false);
    if (cfg.is_discarded() || !cfg.contains("model"))
        throw FormatError("checkpoint config echo is not valid JSON with a 'model' section");
    ModelConfig model_cfg;
    try {
        model_cfg = model_config_from_json(cfg["model"]);
        ckpt.params = make_params(model_cfg);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint model config: ") + e.what());
    }
    ckpt.step = r.u64();
    const auto opt_step = r.u64();
    const auto count = r.u64();

    ckpt.opt = make_optimizer_state(ckpt.params);
    ckpt.opt.step = opt_step;
    std::vector<bool> filled(ckpt.params.size(), false);
    for (std::uint64_t a = 0; a < count; ++a) {
        const auto name_len = r.u32();
        const std::string name = r.str(name_len);
        const auto rank = r.u32();
        if (rank < 1 || rank > 2) throw FormatError("array '" + name + "' has unsupported rank");
        const std::uint64_t rows = rank == 2 ? r.u64() : 1;
        const std::uint64_t cols = r.u64();
        Mat* target = nullptr;
        if (name == "opt.hyper") {
            if (rows != 1 || cols != 3) throw FormatError("array 'opt.hyper' has the wrong shape");
            ckpt.opt.beta1 = r.f64();
            ckpt.opt.beta2 = r.f64();
            ckpt.opt.eps = r.f64();
            continue;
        }
        std::string base = name;
        ModelParams* group = &ckpt.params;
        if (name.starts_with("opt.m:")) {
            base = name.substr(6);
            group = &ckpt.opt.first_moment;
        } else if (name.starts_with("opt.v:")) {
            base = name.substr(6);
            group = &ckpt.opt.second_moment;
        }
        std::size_t idx = 0;
        try {
            idx = group->index_of(base);
        } catch (const ConfigError&) {
            throw FormatError("checkpoint contains unknown array '" + name + "'");
        }
        target = &(*group)[idx];
        if (static_cast<std::uint64_t>(target->rows()) != rows ||
            static_cast<std::uint64_t>(target->cols()) != cols)
            throw FormatError("array '" + name + "' has the wrong shape");
        for (Eigen::Index k = 0; k < target->size(); ++k) target->data()[k] = r.f64();
        if (group == &ckpt.params) filled[idx] = true;
    }
    for (std::size_t i = 0; i < filled.size(); ++i)
        if (!filled[i]) throw FormatError("checkpoint is missing array '" + ckpt.params.info[i].name + "'");
    if (!r.done()) throw FormatError("checkpoint has trailing bytes");
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    // Write-then-rename so an interrupted save never leaves a torn file.
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    write_file(tmp, encode_checkpoint(ckpt));
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    try {
        return decode_checkpoint(read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// --- mask plans ------------------------------------------------------------

std::string encode_mask_plans(const std::vector<MaskPlanRecord>& plans) {
    std::string out;
    for (const auto& rec : plans) {
        json j;
        j["id"] = rec.id;
        j["view"] = rec.view;
        j["grid"] = {rec.plan.grid.grid_h, rec.plan.grid.grid_w};
        j["patch_size"] = rec.plan.grid.patch_size;
        j["masked"] = rec.plan.masked;
        json tags = json::array();
        for (const auto& p : rec.plan.provenance) tags.push_back(p.tag());
        j["provenance"] = tags;
        json blocks = json::array();
        for (const auto& b : rec.plan.blocks) blocks.push_back({b.top, b.left, b.height, b.width});
        j["blocks"] = blocks;
        json sel = json::array();
        for (PartId p : rec.plan.selection) sel.push_back(std::string(part_name(p)));
        j["selection"] = sel;
        out += j.dump() + "\n";
    }
    return out;
}

void write_mask_plans(const std::vector<MaskPlanRecord>& plans, const std::filesystem::path& path) {
    write_file(path, encode_mask_plans(plans));
}

std::vector<MaskPlanRecord> parse_mask_plans(const std::string& text) {
    std::vector<MaskPlanRecord> out;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw FormatError("line " + std::to_string(line_no) + ": not a JSON object");
        MaskPlanRecord rec;
        try {
            rec.id = j.at("id").get<std::string>();
            rec.view = j.at("view").get<std::string>();
            const auto grid = j.at("grid").get<std::vector<int>>();
            if (grid.size() != 2 || grid[0] <= 0 || grid[1] <= 0)
                throw FormatError(line_error(line_no, "grid", "expected [rows, cols]"));
            rec.plan.grid = PatchGrid{grid[0], grid[1], j.value("patch_size", 0)};
            rec.plan.masked = j.at("masked").get<std::vector<int>>();
            const auto tags = j.at("provenance").get<std::vector<std::string>>();
            if (tags.size() != rec.plan.masked.size())
                throw FormatError(line_error(line_no, "provenance",
                                             "length " + std::to_string(tags.size()) +
                                                 " differs from masked length " +
                                                 std::to_string(rec.plan.masked.size())));
            for (const auto& t : tags) rec.plan.provenance.push_back(Provenance::parse(t));
            if (j.contains("blocks"))
                for (const auto& b : j["blocks"]) {
                    const auto v = b.get<std::vector<int>>();
                    if (v.size() != 4) throw FormatError(line_error(line_no, "blocks", "expected [top,left,h,w]"));
                    rec.plan.blocks.push_back(BlockRect{v[0], v[1], v[2], v[3]});
                }
            if (j.contains("selection"))
                for (const auto& s : j["selection"]) {
                    const auto p = part_from_name(s.get<std::string>());
                    if (!p) throw FormatError(line_error(line_no, "selection", "unknown part"));
                    rec.plan.selection.push_back(*p);
                }
        } catch (const json::exception& e) {
            throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
        }
        const int n = rec.plan.grid.n_patches();
        std::vector<bool> seen(static_cast<std::size_t>(n), false);
        for (int idx : rec.plan.masked) {
            if (idx < 0 || idx >= n)
                throw FormatError(line_error(line_no, "masked",
                                             "index " + std::to_string(idx) + " outside the " +
                                                 std::to_string(rec.plan.grid.grid_h) + "x" +
                                                 std::to_string(rec.plan.grid.grid_w) + " grid"));
            if (seen[static_cast<std::size_t>(idx)])
                throw FormatError(line_error(line_no, "masked", "duplicate index " + std::to_string(idx)));
            seen[static_cast<std::size_t>(idx)] = true;
        }
        for (const auto& p : rec.plan.provenance)
            if (p.kind == Provenance::Kind::block &&
                p.block >= static_cast<int>(rec.plan.blocks.size()) && !rec.plan.blocks.empty())
                throw FormatError(line_error(line_no, "provenance", "block tag without a rectangle"));
        out.push_back(std::move(rec));
    }
    return out;
}

std::vector<MaskPlanRecord> read_mask_plans(const std::filesystem::path& path) {
    try {
        return parse_mask_plans(read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace partmim
