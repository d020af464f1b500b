"""Regenerate crates/core/data/{pinyin_table.tsv,syllables.txt} from pypinyin.

Usage: python3 tools/gen_pinyin_data.py <path-to-pypinyin-package-parent>
"""
import os
import sys
import unicodedata

sys.path.insert(0, sys.argv[1] if len(sys.argv) > 1 else ".")
from pypinyin.pinyin_dict import pinyin_dict  # noqa: E402

TONE_MARKS = {"̄": 1, "́": 2, "̌": 3, "̀": 4}
# Interjection-only readings outside the standard initial/final system.
EXCLUDED = {"m", "n", "ng", "hm", "hng", "ê"}


def split_tone(reading):
    tone = 0
    out = []
    for ch in unicodedata.normalize("NFD", reading):
        if ch in TONE_MARKS:
            tone = TONE_MARKS[ch]
        else:
            out.append(ch)
    return unicodedata.normalize("NFC", "".join(out)), tone


def main():
    root = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "data")
    syllables = set()
    rows = []
    for cp in range(0x4E00, 0xA000):
        readings = pinyin_dict.get(cp)
        if not readings:
            continue
        kept = []
        for r in readings.split(","):
            base, tone = split_tone(r)
            if base in EXCLUDED or not base:
                continue
            syllables.add(base)
            token = f"{base}{tone}"
            if token not in kept:
                kept.append(token)
        if kept:
            rows.append(f"{chr(cp)}\t{','.join(kept)}\n")
    with open(os.path.join(root, "pinyin_table.tsv"), "w", encoding="utf-8") as f:
        f.writelines(rows)
    with open(os.path.join(root, "syllables.txt"), "w", encoding="utf-8") as f:
        f.writelines(s + "\n" for s in sorted(syllables))
    print(len(rows), "characters,", len(syllables), "syllables")


if __name__ == "__main__":
    main()
