import csv

import pytest


@pytest.fixture
def manifest_factory(tmp_path):
    """Write a CSV manifest plus backing image files under tmp_path.

    Each row dict needs id/text/label; 'image' (bytes) writes a real file,
    'image_path' passes a path through verbatim (possibly bogus).
    """

    def build(rows, name="manifest.csv"):
        img_dir = tmp_path / "images"
        img_dir.mkdir(exist_ok=True)
        path = tmp_path / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["id", "text", "image_path", "label"])
            writer.writeheader()
            for row in rows:
                if "image_path" in row:
                    image_path = str(row["image_path"])
                else:
                    file = img_dir / f"{row['id']}.img"
                    file.write_bytes(row.get("image", b"image bytes %d" % row["id"]))
                    image_path = str(file)
                writer.writerow({
                    "id": row["id"],
                    "text": row["text"],
                    "image_path": image_path,
                    "label": row["label"],
                })
        return path

    return build


@pytest.fixture
def toy_rows():
    def build(n):
        return [
            {"id": i, "text": f"headline number {i}", "label": i % 2}
            for i in range(n)
        ]

    return build
