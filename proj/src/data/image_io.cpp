#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "maskattn/data.hpp"
#include "maskattn/error.hpp"

namespace fs = std::filesystem;

namespace maskattn {

unsigned char to_byte(double value) {
  if (!(value >= 0.0 && value <= 1.0)) {
    throw ContractError("pixel value " + format_real(value) + " outside [0, 1]");
  }
  return static_cast<unsigned char>(std::floor(255.0 * value + 0.5));
}

namespace {

void write_netpbm(const std::string& path, const char* magic, std::size_t height,
                  std::size_t width, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << magic << "\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

// Reads the next header token, skipping whitespace and '#' comments.
std::string header_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw IoError("truncated header in '" + path + "'");
  return tok;
}

std::vector<unsigned char> read_netpbm(const std::string& path, const std::string& magic,
                                       std::size_t channels, std::size_t& height,
                                       std::size_t& width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  if (header_token(in, path) != magic) throw IoError("'" + path + "' is not a " + magic + " file");
  try {
    width = std::stoul(header_token(in, path));
    height = std::stoul(header_token(in, path));
    if (std::stoul(header_token(in, path)) != 255) throw IoError("'" + path + "': maxval must be 255");
  } catch (const std::logic_error&) {
    throw IoError("malformed header in '" + path + "'");
  }
  std::vector<unsigned char> bytes(channels * height * width);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw IoError("truncated pixel data in '" + path + "'");
  }
  return bytes;
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("write_ppm: expected [3 x H x W], got " + shape_to_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  std::vector<unsigned char> bytes(3 * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) bytes[3 * p + c] = to_byte(image[c * plane + p]);
  write_netpbm(path, "P6", h, w, bytes);
}

Tensor read_ppm(const std::string& path) {
  std::size_t h = 0, w = 0;
  const auto bytes = read_netpbm(path, "P6", 3, h, w);
  const std::size_t plane = h * w;
  std::vector<double> img(3 * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) img[c * plane + p] = bytes[3 * p + c] / 255.0;
  return Tensor({3, h, w}, std::move(img));
}

void write_pgm(const std::string& path, std::size_t height, std::size_t width,
               const std::vector<unsigned char>& pixels) {
  if (pixels.size() != height * width) throw DimensionError("write_pgm: pixel count mismatch");
  write_netpbm(path, "P5", height, width, pixels);
}

std::vector<unsigned char> read_pgm(const std::string& path, std::size_t& height,
                                    std::size_t& width) {
  return read_netpbm(path, "P5", 1, height, width);
}

std::vector<Clip> ingest_davis_dir(const std::string& root) {
  std::vector<Clip> clips;
  const fs::path frames_root = fs::path(root) / "frames";
  const fs::path masks_root = fs::path(root) / "masks";
  if (!fs::exists(frames_root)) return clips;

  std::vector<fs::path> sequences;
  for (const auto& entry : fs::directory_iterator(frames_root))
    if (entry.is_directory()) sequences.push_back(entry.path());
  std::sort(sequences.begin(), sequences.end());

  for (const auto& seq : sequences) {
    std::vector<fs::path> frame_files;
    for (const auto& entry : fs::directory_iterator(seq))
      if (entry.path().extension() == ".ppm") frame_files.push_back(entry.path());
    std::sort(frame_files.begin(), frame_files.end());
    if (frame_files.empty()) continue;

    Clip clip;
    clip.name = seq.filename().string();
    std::size_t n_obj = 0;
    for (std::size_t t = 0; t < frame_files.size(); ++t) {
      Tensor frame = read_ppm(frame_files[t].string());
      if (t > 0 && frame.shape() != clip.frames.front().shape()) {
        throw IoError("sequence '" + clip.name + "': frame " + frame_files[t].filename().string() +
                      " has resolution " + shape_to_string(frame.shape()) + ", expected " +
                      shape_to_string(clip.frames.front().shape()));
      }
      const std::size_t h = frame.dim(1), w = frame.dim(2);
      clip.frames.push_back(std::move(frame));

      const fs::path mask_path = masks_root / clip.name / frame_files[t].stem().concat(".pgm");
      if (!fs::exists(mask_path)) {
        if (t == 0) throw IoError("sequence '" + clip.name + "' has no first-frame mask");
        clip.masks.emplace_back();
        continue;
      }
      std::size_t mh = 0, mw = 0;
      const auto ids = read_pgm(mask_path.string(), mh, mw);
      if (mh != h || mw != w) {
        throw IoError("sequence '" + clip.name + "': mask " + mask_path.filename().string() +
                      " is " + std::to_string(mh) + "x" + std::to_string(mw) + ", frame is " +
                      std::to_string(h) + "x" + std::to_string(w));
      }
      if (t == 0) {
        n_obj = *std::max_element(ids.begin(), ids.end());
        if (n_obj == 0) throw IoError("sequence '" + clip.name + "': first-frame mask is empty");
      }
      std::vector<double> onehot(n_obj * h * w, 0.0);
      for (std::size_t p = 0; p < ids.size(); ++p) {
        if (ids[p] >= 1 && ids[p] <= n_obj) onehot[(ids[p] - 1) * h * w + p] = 1.0;
      }
      clip.masks.emplace_back(Shape{n_obj, h, w}, std::move(onehot));
    }
    clips.push_back(std::move(clip));
  }
  return clips;
}

void write_davis_dir(const std::string& root, const std::vector<Clip>& clips) {
  for (const auto& clip : clips) {
    const fs::path frames_dir = fs::path(root) / "frames" / clip.name;
    const fs::path masks_dir = fs::path(root) / "masks" / clip.name;
    fs::create_directories(frames_dir);
    fs::create_directories(masks_dir);
    for (std::size_t t = 0; t < clip.frames.size(); ++t) {
      char stem[16];
      std::snprintf(stem, sizeof stem, "%05zu", t);
      write_ppm((frames_dir / (std::string(stem) + ".ppm")).string(), clip.frames[t]);
      if (t >= clip.masks.size() || !clip.masks[t].defined()) continue;
      const Tensor& m = clip.masks[t];
      const std::size_t n = m.dim(0), plane = m.dim(1) * m.dim(2);
      if (n > 255) throw IoError("more than 255 objects cannot be stored as ids");
      std::vector<unsigned char> ids(plane, 0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < plane; ++p)
          if (m[i * plane + p] > 0.5) ids[p] = static_cast<unsigned char>(i + 1);
      write_pgm((masks_dir / (std::string(stem) + ".pgm")).string(), m.dim(1), m.dim(2), ids);
    }
  }
}

}  // namespace maskattn
