#include "mos/scene.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

namespace mos {

namespace {

constexpr int kEmptyTok = 0;
constexpr int kColorBase = 1;   // 8 colors
constexpr int kShapeBase = 9;   // 4 shapes
constexpr int kAtTok = 13;
constexpr int kDigitBase = 14;  // digits 0..3
constexpr int kRecolorTok = 18;
constexpr int kMoveTok = 19;
constexpr int kRemoveTok = 20;
constexpr int kAddTok = 21;
constexpr int kToTok = 22;

const char* kTokenNames[kTokenCount] = {
    "EMPTY", "RED",  "GREEN",    "BLUE", "YELLOW", "MAGENTA", "CYAN", "WHITE",
    "BLACK", "SQUARE", "CIRCLE", "TRIANGLE", "CROSS", "AT",   "0",    "1",
    "2",     "3",    "RECOLOR",  "MOVE", "REMOVE", "ADD",     "TO"};

void check_cell(int row, int col) {
  if (row < 0 || row >= kGridSize || col < 0 || col >= kGridSize) {
    throw std::invalid_argument("scene: cell (" + std::to_string(row) + "," +
                                std::to_string(col) + ") outside the " +
                                std::to_string(kGridSize) + "x" + std::to_string(kGridSize) +
                                " grid");
  }
}

int cell_index(const Entity& e) { return e.row * kGridSize + e.col; }

std::array<bool, 64> make_mask(Shape s) {
  std::array<bool, 64> m{};
  switch (s) {
    case Shape::kSquare:
      for (int y = 1; y <= 6; ++y)
        for (int x = 1; x <= 6; ++x) m[y * 8 + x] = true;
      break;
    case Shape::kCircle:
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          double dy = y - 3.5, dx = x - 3.5;
          m[y * 8 + x] = dy * dy + dx * dx <= 2.75 * 2.75;
        }
      break;
    case Shape::kTriangle:
      for (int y = 1; y <= 6; ++y) {
        int half = (y - 1) / 2;
        for (int x = 3 - half; x <= 4 + half; ++x) m[y * 8 + x] = true;
      }
      break;
    case Shape::kCross:
      for (int y = 1; y <= 6; ++y)
        for (int x = 3; x <= 4; ++x) m[y * 8 + x] = true;
      for (int y = 3; y <= 4; ++y)
        for (int x = 1; x <= 6; ++x) m[y * 8 + x] = true;
      break;
  }
  return m;
}

int expect(const std::vector<int>& toks, size_t pos, const char* what,
           int base, int count) {
  if (pos >= toks.size()) {
    throw std::invalid_argument("caption: expected " + std::string(what) + " at position " +
                                std::to_string(pos) + ", but the sequence ends");
  }
  int t = toks[pos];
  if (t < base || t >= base + count) {
    throw std::invalid_argument("caption: expected " + std::string(what) + " at position " +
                                std::to_string(pos) + ", got " +
                                (t >= 0 && t < kTokenCount ? kTokenNames[t]
                                                           : std::to_string(t)));
  }
  return t - base;
}

void expect_literal(const std::vector<int>& toks, size_t pos, int tok, const char* name) {
  if (pos >= toks.size() || toks[pos] != tok) {
    throw std::invalid_argument("caption: expected " + std::string(name) + " at position " +
                                std::to_string(pos));
  }
}

void check_no_duplicates(const SceneSpec& spec, const char* who) {
  for (size_t i = 0; i < spec.entities.size(); ++i) {
    for (size_t j = i + 1; j < spec.entities.size(); ++j) {
      if (cell_index(spec.entities[i]) == cell_index(spec.entities[j])) {
        throw std::invalid_argument(std::string(who) + ": two entities share cell (" +
                                    std::to_string(spec.entities[i].row) + "," +
                                    std::to_string(spec.entities[i].col) + ")");
      }
    }
  }
}

const Entity* find_entity(const SceneSpec& scene, int row, int col) {
  for (const Entity& e : scene.entities) {
    if (e.row == row && e.col == col) return &e;
  }
  return nullptr;
}

void sort_row_major(SceneSpec& spec) {
  std::sort(spec.entities.begin(), spec.entities.end(),
            [](const Entity& a, const Entity& b) { return cell_index(a) < cell_index(b); });
}

}  // namespace

std::array<float, 3> color_rgb(Color c) {
  switch (c) {
    case Color::kRed: return {1.f, 0.f, 0.f};
    case Color::kGreen: return {0.f, 1.f, 0.f};
    case Color::kBlue: return {0.f, 0.f, 1.f};
    case Color::kYellow: return {1.f, 1.f, 0.f};
    case Color::kMagenta: return {1.f, 0.f, 1.f};
    case Color::kCyan: return {0.f, 1.f, 1.f};
    case Color::kWhite: return {1.f, 1.f, 1.f};
    case Color::kBlack: return {0.f, 0.f, 0.f};
  }
  throw std::invalid_argument("color_rgb: invalid color id");
}

const std::array<bool, kCellPixels * kCellPixels>& shape_mask(Shape s) {
  static const std::array<std::array<bool, 64>, 4> masks = {
      make_mask(Shape::kSquare), make_mask(Shape::kCircle), make_mask(Shape::kTriangle),
      make_mask(Shape::kCross)};
  int i = static_cast<int>(s);
  if (i < 0 || i >= kNumShapes) throw std::invalid_argument("shape_mask: invalid shape id");
  return masks[static_cast<size_t>(i)];
}

const char* token_name(int id) {
  if (id < 0 || id >= kTokenCount) {
    throw std::out_of_range("token_name: id " + std::to_string(id) + " out of range [0," +
                            std::to_string(kTokenCount) + ")");
  }
  return kTokenNames[id];
}

int token_id(const std::string& word) {
  std::string up;
  up.reserve(word.size());
  for (char ch : word) up.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
  for (int i = 0; i < kTokenCount; ++i) {
    if (up == kTokenNames[i]) return i;
  }
  throw std::invalid_argument("token_id: unknown word '" + word + "'");
}

int color_token(Color c) { return kColorBase + static_cast<int>(c); }
int shape_token(Shape s) { return kShapeBase + static_cast<int>(s); }
int digit_token(int v) {
  if (v < 0 || v >= kGridSize) {
    throw std::invalid_argument("digit_token: " + std::to_string(v) + " outside [0," +
                                std::to_string(kGridSize) + ")");
  }
  return kDigitBase + v;
}

Tensor render_scene(const SceneSpec& spec) {
  check_no_duplicates(spec, "render_scene");
  Tensor img = Tensor::full({kImageSize, kImageSize, 3}, kBackground);
  float* p = img.data();
  for (const Entity& e : spec.entities) {
    check_cell(e.row, e.col);
    const auto& mask = shape_mask(e.shape);
    auto rgb = color_rgb(e.color);
    int y0 = e.row * kCellPixels, x0 = e.col * kCellPixels;
    for (int y = 0; y < kCellPixels; ++y) {
      for (int x = 0; x < kCellPixels; ++x) {
        if (!mask[y * kCellPixels + x]) continue;
        float* px = p + ((y0 + y) * kImageSize + (x0 + x)) * 3;
        px[0] = rgb[0];
        px[1] = rgb[1];
        px[2] = rgb[2];
      }
    }
  }
  return img;
}

std::vector<int> caption_of(const SceneSpec& spec) {
  check_no_duplicates(spec, "caption_of");
  if (spec.entities.empty()) return {kEmptyTok};
  SceneSpec sorted = spec;
  sort_row_major(sorted);
  std::vector<int> out;
  out.reserve(sorted.entities.size() * 5);
  for (const Entity& e : sorted.entities) {
    check_cell(e.row, e.col);
    out.push_back(color_token(e.color));
    out.push_back(shape_token(e.shape));
    out.push_back(kAtTok);
    out.push_back(digit_token(e.row));
    out.push_back(digit_token(e.col));
  }
  return out;
}

SceneSpec parse_caption(const std::vector<int>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("caption: empty token sequence");
  if (tokens.size() == 1 && tokens[0] == kEmptyTok) return {};
  SceneSpec spec;
  size_t pos = 0;
  while (pos < tokens.size()) {
    Entity e;
    e.color = static_cast<Color>(expect(tokens, pos, "a color token", kColorBase, kNumColors));
    e.shape = static_cast<Shape>(expect(tokens, pos + 1, "a shape token", kShapeBase, kNumShapes));
    expect_literal(tokens, pos + 2, kAtTok, "AT");
    e.row = expect(tokens, pos + 3, "a row digit", kDigitBase, kGridSize);
    e.col = expect(tokens, pos + 4, "a column digit", kDigitBase, kGridSize);
    pos += 5;
    spec.entities.push_back(e);
  }
  check_no_duplicates(spec, "caption");
  for (size_t i = 1; i < spec.entities.size(); ++i) {
    if (cell_index(spec.entities[i - 1]) > cell_index(spec.entities[i])) {
      throw std::invalid_argument("caption: entities not in row-major order at entity " +
                                  std::to_string(i));
    }
  }
  return spec;
}

SceneSpec parse_prompt(const std::string& text) {
  std::vector<int> toks;
  std::string word;
  for (size_t i = 0; i <= text.size(); ++i) {
    char ch = i < text.size() ? text[i] : ' ';
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!word.empty()) {
        toks.push_back(token_id(word));
        word.clear();
      }
    } else {
      word.push_back(ch);
    }
  }
  if (toks.empty()) throw std::invalid_argument("parse_prompt: no tokens in prompt");
  if (toks.size() == 1 && toks[0] == kEmptyTok) return {};
  // Same grammar as captions but any entity order.
  SceneSpec spec;
  size_t pos = 0;
  while (pos < toks.size()) {
    Entity e;
    e.color = static_cast<Color>(expect(toks, pos, "a color word", kColorBase, kNumColors));
    e.shape = static_cast<Shape>(expect(toks, pos + 1, "a shape word", kShapeBase, kNumShapes));
    expect_literal(toks, pos + 2, kAtTok, "AT");
    e.row = expect(toks, pos + 3, "a row digit", kDigitBase, kGridSize);
    e.col = expect(toks, pos + 4, "a column digit", kDigitBase, kGridSize);
    pos += 5;
    spec.entities.push_back(e);
  }
  check_no_duplicates(spec, "parse_prompt");
  sort_row_major(spec);
  return spec;
}

std::string tokens_to_string(const std::vector<int>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out += ' ';
    out += token_name(tokens[i]);
  }
  return out;
}

double alignment_score(const Tensor& image, const SceneSpec& spec) {
  if (image.shape() != std::vector<int>{kImageSize, kImageSize, 3}) {
    throw std::invalid_argument("alignment_score: image shape " + shape_str(image.shape()) +
                                ", expected [32 32 3]");
  }
  check_no_duplicates(spec, "alignment_score");
  if (spec.entities.empty()) return 1.0;

  const float* p = image.data();
  int hits = 0;
  for (const Entity& e : spec.entities) {
    check_cell(e.row, e.col);
    const auto& mask = shape_mask(e.shape);
    auto rgb = color_rgb(e.color);
    int y0 = e.row * kCellPixels, x0 = e.col * kCellPixels;

    // (a) mean color under the mask close to the target color.
    double mean[3] = {0, 0, 0};
    int count = 0;
    // (b) correlation between mask and distance-from-background.
    double fg[64];
    for (int y = 0; y < kCellPixels; ++y) {
      for (int x = 0; x < kCellPixels; ++x) {
        const float* px = p + ((y0 + y) * kImageSize + (x0 + x)) * 3;
        double d = 0.0;
        for (int c = 0; c < 3; ++c) {
          double dd = px[c] - kBackground;
          d += dd * dd;
        }
        fg[y * kCellPixels + x] = std::sqrt(d);
        if (mask[y * kCellPixels + x]) {
          for (int c = 0; c < 3; ++c) mean[c] += px[c];
          ++count;
        }
      }
    }
    double cdist = 0.0;
    for (int c = 0; c < 3; ++c) {
      double d = mean[c] / count - rgb[c];
      cdist += d * d;
    }
    bool color_ok = std::sqrt(cdist) < 0.25;

    double mm = 0.0, mf = 0.0;
    for (int i = 0; i < 64; ++i) {
      mm += mask[i] ? 1.0 : 0.0;
      mf += fg[i];
    }
    mm /= 64.0;
    mf /= 64.0;
    double cov = 0.0, vm = 0.0, vf = 0.0;
    for (int i = 0; i < 64; ++i) {
      double dm = (mask[i] ? 1.0 : 0.0) - mm;
      double df = fg[i] - mf;
      cov += dm * df;
      vm += dm * dm;
      vf += df * df;
    }
    bool shape_ok = vm > 0.0 && vf > 0.0 && cov / std::sqrt(vm * vf) > 0.5;

    if (color_ok && shape_ok) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(spec.entities.size());
}

SceneSpec apply_edit(const SceneSpec& scene, const std::vector<int>& instruction) {
  check_no_duplicates(scene, "apply_edit");
  if (instruction.empty()) throw std::invalid_argument("apply_edit: empty instruction");
  SceneSpec out = scene;
  int verb = instruction[0];
  if (verb == kRecolorTok) {
    if (instruction.size() != 4) throw std::invalid_argument("apply_edit: RECOLOR wants ROW COL COLOR");
    int row = expect(instruction, 1, "a row digit", kDigitBase, kGridSize);
    int col = expect(instruction, 2, "a column digit", kDigitBase, kGridSize);
    int color = expect(instruction, 3, "a color token", kColorBase, kNumColors);
    for (Entity& e : out.entities) {
      if (e.row == row && e.col == col) {
        e.color = static_cast<Color>(color);
        return out;
      }
    }
    throw std::invalid_argument("apply_edit: no entity at cell (" + std::to_string(row) + "," +
                                std::to_string(col) + ") to recolor");
  }
  if (verb == kMoveTok) {
    if (instruction.size() != 6) throw std::invalid_argument("apply_edit: MOVE wants ROW COL TO ROW COL");
    int row = expect(instruction, 1, "a row digit", kDigitBase, kGridSize);
    int col = expect(instruction, 2, "a column digit", kDigitBase, kGridSize);
    expect_literal(instruction, 3, kToTok, "TO");
    int nrow = expect(instruction, 4, "a row digit", kDigitBase, kGridSize);
    int ncol = expect(instruction, 5, "a column digit", kDigitBase, kGridSize);
    if (find_entity(out, nrow, ncol) != nullptr) {
      throw std::invalid_argument("apply_edit: destination cell (" + std::to_string(nrow) + "," +
                                  std::to_string(ncol) + ") is occupied");
    }
    for (Entity& e : out.entities) {
      if (e.row == row && e.col == col) {
        e.row = nrow;
        e.col = ncol;
        sort_row_major(out);
        return out;
      }
    }
    throw std::invalid_argument("apply_edit: no entity at cell (" + std::to_string(row) + "," +
                                std::to_string(col) + ") to move");
  }
  if (verb == kRemoveTok) {
    if (instruction.size() != 3) throw std::invalid_argument("apply_edit: REMOVE wants ROW COL");
    int row = expect(instruction, 1, "a row digit", kDigitBase, kGridSize);
    int col = expect(instruction, 2, "a column digit", kDigitBase, kGridSize);
    for (size_t i = 0; i < out.entities.size(); ++i) {
      if (out.entities[i].row == row && out.entities[i].col == col) {
        out.entities.erase(out.entities.begin() + static_cast<long>(i));
        return out;
      }
    }
    throw std::invalid_argument("apply_edit: no entity at cell (" + std::to_string(row) + "," +
                                std::to_string(col) + ") to remove");
  }
  if (verb == kAddTok) {
    if (instruction.size() != 6) throw std::invalid_argument("apply_edit: ADD wants COLOR SHAPE AT ROW COL");
    Entity e;
    e.color = static_cast<Color>(expect(instruction, 1, "a color token", kColorBase, kNumColors));
    e.shape = static_cast<Shape>(expect(instruction, 2, "a shape token", kShapeBase, kNumShapes));
    expect_literal(instruction, 3, kAtTok, "AT");
    e.row = expect(instruction, 4, "a row digit", kDigitBase, kGridSize);
    e.col = expect(instruction, 5, "a column digit", kDigitBase, kGridSize);
    if (find_entity(out, e.row, e.col) != nullptr) {
      throw std::invalid_argument("apply_edit: cell (" + std::to_string(e.row) + "," +
                                  std::to_string(e.col) + ") is occupied");
    }
    out.entities.push_back(e);
    sort_row_major(out);
    return out;
  }
  throw std::invalid_argument("apply_edit: unknown instruction verb token " +
                              std::to_string(verb));
}

SceneSpec sample_scene(Pcg32& rng) {
  int count = 1 + static_cast<int>(rng.next_below(kMaxEntities));
  // Partial Fisher-Yates over the 16 cells for distinct positions.
  std::array<int, kGridSize * kGridSize> cells{};
  for (int i = 0; i < kGridSize * kGridSize; ++i) cells[static_cast<size_t>(i)] = i;
  SceneSpec spec;
  for (int i = 0; i < count; ++i) {
    int j = i + static_cast<int>(rng.next_below(static_cast<uint32_t>(16 - i)));
    std::swap(cells[static_cast<size_t>(i)], cells[static_cast<size_t>(j)]);
    Entity e;
    e.row = cells[static_cast<size_t>(i)] / kGridSize;
    e.col = cells[static_cast<size_t>(i)] % kGridSize;
    e.shape = static_cast<Shape>(rng.next_below(kNumShapes));
    e.color = static_cast<Color>(rng.next_below(kNumColors));
    spec.entities.push_back(e);
  }
  sort_row_major(spec);
  return spec;
}

std::vector<int> sample_edit_instruction(const SceneSpec& scene, Pcg32& rng) {
  check_no_duplicates(scene, "sample_edit_instruction");
  std::vector<int> free_cells;
  for (int i = 0; i < kGridSize * kGridSize; ++i) {
    if (find_entity(scene, i / kGridSize, i % kGridSize) == nullptr) free_cells.push_back(i);
  }
  std::vector<int> ops;  // applicable verb tokens
  if (!scene.entities.empty()) {
    ops.push_back(kRecolorTok);
    ops.push_back(kRemoveTok);
    if (!free_cells.empty()) ops.push_back(kMoveTok);
  }
  if (static_cast<int>(scene.entities.size()) < kMaxEntities && !free_cells.empty()) {
    ops.push_back(kAddTok);
  }
  if (ops.empty()) throw std::invalid_argument("sample_edit_instruction: no applicable edit");
  int verb = ops[rng.next_below(static_cast<uint32_t>(ops.size()))];

  auto pick_entity = [&]() -> const Entity& {
    return scene.entities[rng.next_below(static_cast<uint32_t>(scene.entities.size()))];
  };
  if (verb == kRecolorTok) {
    const Entity& e = pick_entity();
    int delta = 1 + static_cast<int>(rng.next_below(kNumColors - 1));
    int color = (static_cast<int>(e.color) + delta) % kNumColors;
    return {kRecolorTok, digit_token(e.row), digit_token(e.col), kColorBase + color};
  }
  if (verb == kRemoveTok) {
    const Entity& e = pick_entity();
    return {kRemoveTok, digit_token(e.row), digit_token(e.col)};
  }
  if (verb == kMoveTok) {
    const Entity& e = pick_entity();
    int dst = free_cells[rng.next_below(static_cast<uint32_t>(free_cells.size()))];
    return {kMoveTok, digit_token(e.row), digit_token(e.col), kToTok,
            digit_token(dst / kGridSize), digit_token(dst % kGridSize)};
  }
  int dst = free_cells[rng.next_below(static_cast<uint32_t>(free_cells.size()))];
  return {kAddTok, kColorBase + static_cast<int>(rng.next_below(kNumColors)),
          kShapeBase + static_cast<int>(rng.next_below(kNumShapes)), kAtTok,
          digit_token(dst / kGridSize), digit_token(dst % kGridSize)};
}

}  // namespace mos
