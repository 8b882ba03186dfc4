import sys


def main():
    try:
        from dlab.cli import main as run
    except ImportError as exc:
        raise ImportError(
            "Couldn't import dlab. Are its requirements installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    sys.exit(run(sys.argv[1:]))


if __name__ == '__main__':
    main()
