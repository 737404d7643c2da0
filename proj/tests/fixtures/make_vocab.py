"""Writes vocab_10k.txt: 10,000 distinct lowercase tokens for the embedding collision census.

Domain words first, then seeded consonant-vowel pseudo-words and a few numeric tokens.
"""
import random

DOMAIN = """
plant leaf leaves stem canopy chlorophyll ndvi ndwi ci nir rgb water stress drought
healthy vigor growth biomass photosynthesis reflectance red green blue infrared soil
temperature humidity dew precipitation cloud cover solar radiation uv index wind gust
speed visibility weather image description greenhouse field crop seedling tomato
pepper lettuce basil moisture wilting yellowing necrosis disease pest nitrogen
""".split()

def main():
    rng = random.Random(20240601)
    onsets = ["b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
              "br", "cl", "dr", "fl", "gr", "pl", "pr", "st", "tr", "sh", "ch", "th"]
    vowels = ["a", "e", "i", "o", "u", "ai", "ea", "io", "ou"]
    codas = ["", "n", "r", "s", "t", "l", "m", "nd", "st", "x"]
    words = list(dict.fromkeys(DOMAIN))
    seen = set(words)
    for n in range(0, 1000, 7):
        tok = f"{n / 100:.2f}"
        words.append(tok)
        seen.add(tok)
    while len(words) < 10000:
        w = "".join(rng.choice(onsets) + rng.choice(vowels) for _ in range(rng.randint(1, 3))) + rng.choice(codas)
        if w not in seen:
            seen.add(w)
            words.append(w)
    with open("vocab_10k.txt", "w") as f:
        f.write("\n".join(words) + "\n")

if __name__ == "__main__":
    main()
