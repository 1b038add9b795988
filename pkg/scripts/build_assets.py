"""Regenerate the shipped glyph atlas and word list assets.

The atlas is a deterministic block font: each character is drawn on a 3x5
grid, upscaled 2x to 6x10, and centered in an 8x16 cell. Strokes are two
pixels wide by construction, so every glyph carries enough ink that an empty
cell never falls within matching distance of any template.
"""

import json
from pathlib import Path

ASSETS = Path(__file__).resolve().parent.parent / "src" / "ocrbypass" / "assets"

CELL_W, CELL_H = 8, 16

# 3x5 source bitmaps, one string of 15 chars per glyph ('#' = ink), row-major.
FONT_3X5 = {
    "a": ".#.#.#####.##.#",
    "b": "##.#.###.#.###.",
    "c": ".###..#..#...##",
    "d": "##.#.##.##.###.",
    "e": "####..##.#..###",
    "f": "####..##.#..#..",
    "g": ".###..#.##.#.##",
    "h": "#.##.#####.##.#",
    "i": "###.#..#..#.###",
    "j": ".##..#..##.#.#.",
    "k": "#.###.#..##.#.#",
    "l": "#..#..#..#..###",
    "m": "#.#####.##.##.#",
    "n": "#..##.#.##.##.#",
    "o": ".#.#.##.##.#.#.",
    "p": "##.#.###.#..#..",
    "q": ".#.#.##.#.##..#",
    "r": "##.#.###.#.##.#",
    "s": ".###...#...###.",
    "t": "###.#..#..#..#.",
    "u": "#.##.##.##.#.#.",
    "v": "#.##.##.#.#..#.",
    "w": "#.##.##.#####.#",
    "x": "#.##.#.#.#.##.#",
    "y": "#.##.#.#..#..#.",
    "z": "###..#.#.#..###",
    "0": "####.##.##.####",
    "1": ".#.##..#..#.###",
    "2": ".#.#.#..#.#.###",
    "3": "###..#.##..###.",
    "4": "#.##.####..#..#",
    "5": "####..##...###.",
    "6": ".###..####.#.#.",
    "7": "###..#..#..#..#",
    "8": ".#.#.#.#.#.#.#.",
    "9": ".#.#.#.##..#.#.",
}


def glyph_cell(pattern: str) -> list[list[int]]:
    assert len(pattern) == 15 and set(pattern) <= {"#", "."}
    cell = [[0] * CELL_W for _ in range(CELL_H)]
    for r in range(5):
        for c in range(3):
            if pattern[r * 3 + c] == "#":
                for dy in range(2):
                    for dx in range(2):
                        cell[3 + 2 * r + dy][1 + 2 * c + dx] = 1
    return cell


WORDS = """
the and for are but not you all can had her was one our out day get has him
his how man new now old see two way who boy did its let put say she too use
total item cash card sale tax due change price store shop till lane code date
time unit qty pack size brand fresh dairy bread milk eggs rice corn beans
soup meat fish pork beef lamb veal crab tuna sole bass cake pie tart bun roll
salt sugar spice basil thyme sage mint dill oil vinegar flour yeast cocoa tea
juice soda water cola beer wine cider gin rum malt hops apple pear plum grape
melon lemon lime peach mango kiwi fig date2 berry cherry olive onion garlic
leek kale chard cress bean peas okra yam taro spud chips crisp wafer fudge
candy gum mint2 jam honey syrup cream curd whey ghee lard suet broth stock
gravy paste puree salsa pesto mayo must seed nut bolt wire tape glue clip pin
nail screw hook rope cord bag box jar tin can2 tub pot pan lid cup mug bowl
dish tray rack bin sack case crate pail drum vial tube flask spout cap cork
plug knob dial lever gear belt pump hose pipe duct vent fan coil fuse bulb
lamp cord2 plugs watt volt amp ohm hertz meter liter gram ounce pound inch
foot yard mile acre pint quart euro cent pence franc peso yen rand krona
crown ruble dinar float round spare extra bonus gift token stamp badge label
print paper card2 sheet pad note memo form slip bill check draft order quote
offer deal terms gross nett rate fee levy duty toll fare rent lease hire loan
debt fund bank teller clerk staff crew team shift hours week month year qtr
jan feb mar apr may jun jul aug sep oct nov dec mon tue wed thu fri sat sun
north south east west left right upper lower front back mid top end side
gate door ramp dock bay aisle shelf stand kiosk booth stall cart trolley
basket scan weigh pack2 wrap seal ship post mail truck van fleet route stop
zone area city town port pier quay wharf depot yard2 site plot block unit2
suite floor level room hall wing annex tower plaza court lane2 road street
drive place walk path trail ridge hill dale glen ford bridge creek river
lake pond bayou marsh swamp field farm barn silo mill forge kiln vat
works plant shed store2 vault safe till2 chest trunk locker cage pen coop
"""

NUMERIC = [
    "0", "1", "2", "5", "10", "12", "15", "20", "24", "25", "30", "42", "48",
    "50", "60", "64", "75", "99", "100", "125", "150", "199", "200", "249",
    "250", "299", "300", "365", "400", "499", "500", "750", "999", "1000",
    "1299", "1499", "1999", "2024", "2499", "4999", "9999", "19999",
]


def build_words() -> list[str]:
    alphabet = set("abcdefghijklmnopqrstuvwxyz0123456789")
    seen = []
    for token in WORDS.split() + NUMERIC:
        word = "".join(ch for ch in token if ch in alphabet)
        if 1 <= len(word) <= 6 and word not in seen:
            seen.append(word)
    return seen


def main() -> None:
    cells = {ch: glyph_cell(p) for ch, p in FONT_3X5.items()}

    worst = (1.0, "", "")
    chars = sorted(cells)
    for i, a in enumerate(chars):
        for b in chars[i + 1 :]:
            diff = sum(
                cells[a][r][c] != cells[b][r][c] for r in range(CELL_H) for c in range(CELL_W)
            ) / (CELL_W * CELL_H)
            if diff < worst[0]:
                worst = (diff, a, b)
    inks = {ch: sum(sum(row) for row in cell) / (CELL_W * CELL_H) for ch, cell in cells.items()}
    print(f"min ink fraction: {min(inks.values()):.3f} ({min(inks, key=inks.get)!r})")
    print(f"min pairwise mismatch: {worst[0]:.4f} ({worst[1]!r} vs {worst[2]!r})")
    if min(inks.values()) < 0.15:
        raise SystemExit("a glyph is too thin: blank cells could match it")
    if worst[0] < 0.04:
        raise SystemExit("two glyphs are too similar for reliable matching")

    ASSETS.mkdir(parents=True, exist_ok=True)
    atlas = {
        "glyph_height": CELL_H,
        "glyph_width": CELL_W,
        "glyphs": {
            ch: ["".join("1" if v else "0" for v in row) for row in cell]
            for ch, cell in cells.items()
        },
    }
    (ASSETS / "glyph_atlas.json").write_text(json.dumps(atlas, indent=1, sort_keys=True))

    words = build_words()
    (ASSETS / "words.txt").write_text("\n".join(words) + "\n")
    print(f"wrote atlas ({len(cells)} glyphs) and word list ({len(words)} words)")


if __name__ == "__main__":
    main()
