"""
Écriture atomique des fichiers produits et manifeste des artefacts.
"""
import hashlib
import io
import json
import os
import tempfile

FLOAT_FORMAT = "%.9g"
MANIFEST_JSON = "manifest.json"


def atomic_write_bytes(path, payload):
    """
    Écrit dans un fichier temporaire du même répertoire puis renomme.
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return path


def atomic_write_text(path, text):
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_frame_csv(frame, path):
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return atomic_write_text(path, buffer.getvalue())


def dumps_json(document):
    return json.dumps(document, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_json(document, path):
    return atomic_write_text(path, dumps_json(document))


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class OutputBundle:
    """
    Suit les fichiers écrits dans un répertoire de sortie et produit le manifeste.
    """

    def __init__(self, out_dir):
        self.out_dir = os.fspath(out_dir)
        self.files = []

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def add(self, path):
        path = os.fspath(path)
        if path not in self.files:
            self.files.append(path)
        return path

    def extend(self, paths):
        for path in paths:
            self.add(path)

    def manifest(self):
        entries = []
        for path in sorted(self.files):
            entries.append({
                "path": os.path.relpath(path, self.out_dir).replace(os.sep, "/"),
                "sha256": sha256_file(path),
                "bytes": os.path.getsize(path),
            })
        return {"files": entries}

    def write_manifest(self):
        return write_json(self.manifest(), self.path(MANIFEST_JSON))
