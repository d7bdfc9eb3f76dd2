"""
Shared helpers
==============

Logger factory, atomic output writes and content hashing used by every
module and by the command-line entry point.
"""

import contextlib
import hashlib
import logging
import os
import shutil
import tempfile

from config import get_config

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def get_logger(name):
    """Return a stderr logger with the project format, configured once."""
    logger = logging.getLogger(name)
    if not getattr(logger, '_wildsat_configured', False):
        logger.setLevel(get_config().LOG_LEVEL)
        formatter = logging.Formatter(LOG_FORMAT)
        handler = logging.StreamHandler()
        handler.setFormatter(formatter)
        logger.addHandler(handler)
        logger.propagate = False
        logger._wildsat_configured = True
    return logger


def atomic_write_bytes(path, data):
    """Write bytes to a temp file beside `path`, then rename over it."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.tmp-')
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode('utf-8'))


@contextlib.contextmanager
def atomic_directory(path):
    """Yield a scratch directory that replaces `path` only if the block succeeds."""
    path = os.path.abspath(path)
    parent = os.path.dirname(path)
    os.makedirs(parent, exist_ok=True)
    tmp_dir = tempfile.mkdtemp(dir=parent, prefix='.tmp-')
    try:
        yield tmp_dir
    except BaseException:
        shutil.rmtree(tmp_dir, ignore_errors=True)
        raise
    if os.path.isdir(path):
        shutil.rmtree(path)
    os.replace(tmp_dir, path)


def git_blob_hash(path):
    """Content hash computed the way git hashes a blob."""
    with open(path, 'rb') as handle:
        content = handle.read()
    header = f'blob {len(content)}\0'.encode('utf-8')
    return hashlib.sha1(header + content).hexdigest()


def hash_inputs(paths):
    """Map every existing file under `paths` (files or directories) to its blob hash."""
    hashes = {}
    for path in paths:
        if path is None or not os.path.exists(path):
            continue
        if os.path.isdir(path):
            for root, dirs, files in os.walk(path):
                dirs.sort()
                for name in sorted(files):
                    full = os.path.join(root, name)
                    hashes[os.path.relpath(full, os.path.dirname(os.path.abspath(path)))] = git_blob_hash(full)
        else:
            hashes[os.path.basename(path)] = git_blob_hash(path)
    return hashes
