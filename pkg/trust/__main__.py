from trust.cli import main

main()
