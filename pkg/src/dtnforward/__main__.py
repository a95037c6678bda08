from dtnforward.cli import cli

# test with:
#     python -m dtnforward
if __name__ == "__main__":
    cli()
